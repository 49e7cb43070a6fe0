# runlog.py - JSON run log shared by every run_sed.py command
import json
import os
from datetime import datetime

DEFAULT_RUN_LOG = os.path.join("data", "run_log.json")
MAX_ENTRIES = 100


def run_log_path():
    return os.environ.get("CSED_RUN_LOG", DEFAULT_RUN_LOG)


def load_run_log(path=None):
    path = path or run_log_path()
    if not os.path.exists(path):
        return []
    try:
        with open(path, "r", encoding="utf-8") as f:
            log = json.load(f)
        if isinstance(log, list):
            return log
        reason = "not a JSON list"
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        reason = str(e)
    print(f"  [WARN] unreadable run log {path} ({reason}); moved to {path}.bad")
    os.replace(path, path + ".bad")
    return []


def save_run_log(log, path=None):
    path = path or run_log_path()
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        json.dump(log, f, ensure_ascii=False, indent=2)


def record_run(command, started_at, status, exit_code, error=None, summary=None, path=None):
    """Append one run entry, keeping the last MAX_ENTRIES."""
    log = load_run_log(path)
    log.append({
        "command": command,
        "started_at": started_at,
        "completed_at": datetime.now().isoformat(),
        "status": status,
        "exit_code": exit_code,
        "error": error,
        "summary": summary or {},
    })
    if len(log) > MAX_ENTRIES:
        log = log[-MAX_ENTRIES:]
    save_run_log(log, path)
    return log[-1]
