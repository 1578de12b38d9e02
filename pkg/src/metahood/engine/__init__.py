"""Policy execution: triggers, action plugins, the HSM state machine and alerts."""

from metahood.engine.actions import (
    ActionContext,
    ActionPlugin,
    ActionResult,
    get_action,
    register,
    registered_actions,
    unregister,
)
from metahood.engine.alerts import AlertSinkError, alert_sweep
from metahood.engine.hsm import HsmRefused, check_transition, hsm_transition
from metahood.engine.policy import EXIT_ABORTED, EXIT_COMPLETE, EXIT_FAILURES, PolicyRun, run_policy
from metahood.engine.triggers import TriggerConfigError, TriggerStatus, check_triggers

__all__ = [
    "EXIT_ABORTED", "EXIT_COMPLETE", "EXIT_FAILURES", "ActionContext", "ActionPlugin", "ActionResult",
    "AlertSinkError", "HsmRefused", "PolicyRun", "TriggerConfigError", "TriggerStatus", "alert_sweep",
    "check_transition", "check_triggers", "get_action", "hsm_transition", "register", "registered_actions",
    "run_policy", "unregister",
]
