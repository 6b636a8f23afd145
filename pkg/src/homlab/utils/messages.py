import json
from funcnodes_core import JSONEncoder


def make_progress_message(
    message: str, done: int, total: int, status: str = "running"
) -> dict:
    return {
        "type": "progress",
        "message": message,
        "status": status,
        "done": done,
        "total": total,
        "progress": done / total if total else 1.0,
    }


def make_progress_message_string(
    message: str, done: int, total: int, status: str = "running"
) -> str:
    return json.dumps(
        make_progress_message(message, done, total, status), cls=JSONEncoder
    )


def job_event_message(event: str, job: str, **kwargs) -> dict:
    return {
        "type": "jobevent",
        "event": event,
        "job": job,
        "data": kwargs,
    }


def job_event_message_string(event: str, job: str, **kwargs) -> str:
    return json.dumps(job_event_message(event, job, **kwargs), cls=JSONEncoder)
