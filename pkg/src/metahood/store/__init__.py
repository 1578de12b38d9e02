"""The transactional metadata mirror."""

from metahood.store.model import (
    SORT_KEYS,
    QuerySpec,
    ShardUnavailable,
    SoftRmRecord,
    StoreError,
    TxnAborted,
    TxnConflict,
)
from metahood.store.sqlite import Shard, Store, Txn, open_store, shard_paths, sharded

__all__ = [
    "SORT_KEYS", "QuerySpec", "Shard", "ShardUnavailable", "SoftRmRecord", "Store", "StoreError", "Txn",
    "TxnAborted", "TxnConflict", "open_store", "shard_paths", "sharded",
]
