"""Changelog ingestion."""

from metahood.ingest.records import CREATES, ChangelogRecord, RecordParseError, RecordType, parse_record

__all__ = ["CREATES", "ChangelogRecord", "RecordParseError", "RecordType", "parse_record"]
