from __future__ import annotations
import asyncio
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, Optional, Sequence, TypeVar, Union
import logging

from ._logging import get_module_logger
from .utils.messages import job_event_message_string, make_progress_message_string

T = TypeVar("T")
R = TypeVar("R")

JobOutcome = Union[R, BaseException]


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


class JobManager:
    """Runs independent jobs on a thread pool driven by an asyncio loop.

    Results come back in submission order whatever the completion order, so
    reductions over them are independent of the worker count. Exceptions are
    returned in place of results and never cancel sibling jobs.
    """

    def __init__(
        self, workers: Optional[int] = None, logger: logging.Logger | None = None
    ) -> None:
        if workers is not None and workers < 1:
            raise ValueError("workers must be positive")
        self._workers = workers or default_workers()
        if logger is None:
            logger = get_module_logger("jobs")
        self._logger = logger
        self._loop: asyncio.AbstractEventLoop = None  # type: ignore
        self._done = 0
        self._total = 0

    @property
    def workers(self) -> int:
        return self._workers

    @property
    def progress(self) -> float:
        return self._done / self._total if self._total else 1.0

    def reset_loop(self):
        try:
            self._loop = asyncio.get_running_loop()
        except RuntimeError:
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", category=DeprecationWarning)
                try:
                    self._loop = asyncio.get_event_loop()
                except RuntimeError:
                    self._loop = asyncio.new_event_loop()

    async def run_async(
        self,
        func: Callable[[T], R],
        items: Sequence[T],
        label: str = "jobs",
    ) -> List[JobOutcome]:
        self.reset_loop()
        self._done = 0
        self._total = len(items)
        if not items:
            return []

        with ThreadPoolExecutor(
            max_workers=min(self._workers, len(items)),
            thread_name_prefix=f"homlab-{label}",
        ) as pool:

            async def _run_one(index: int, item: T) -> R:
                try:
                    return await self._loop.run_in_executor(pool, func, item)
                except Exception as exc:
                    self._logger.debug(
                        job_event_message_string(
                            "failed", f"{label}[{index}]", error=str(exc)
                        )
                    )
                    raise
                finally:
                    self._done += 1
                    self._logger.debug(
                        make_progress_message_string(label, self._done, self._total)
                    )

            return await asyncio.gather(
                *[_run_one(i, item) for i, item in enumerate(items)],
                return_exceptions=True,
            )

    def run(
        self,
        func: Callable[[T], R],
        items: Sequence[T],
        label: str = "jobs",
    ) -> List[JobOutcome]:
        """Synchronous facade over run_async.

        Inside a running event loop the jobs are driven from a helper thread
        with its own loop.
        """
        if self._workers == 1:
            return self._run_inline(func, items, label)
        try:
            asyncio.get_running_loop()
        except RuntimeError:
            return asyncio.run(self.run_async(func, items, label))
        with ThreadPoolExecutor(max_workers=1) as helper:
            return helper.submit(
                asyncio.run, self.run_async(func, items, label)
            ).result()

    def _run_inline(
        self, func: Callable[[T], R], items: Sequence[T], label: str
    ) -> List[JobOutcome]:
        self._done = 0
        self._total = len(items)
        out: List[Any] = []
        for i, item in enumerate(items):
            try:
                out.append(func(item))
            except Exception as exc:
                self._logger.debug(
                    job_event_message_string("failed", f"{label}[{i}]", error=str(exc))
                )
                out.append(exc)
            self._done += 1
            self._logger.debug(
                make_progress_message_string(label, self._done, self._total)
            )
        return out


def raise_first(outcomes: Sequence[Any]) -> List[Any]:
    """Re-raises the first exception among the outcomes, else returns them."""
    for outcome in outcomes:
        if isinstance(outcome, BaseException):
            raise outcome
    return list(outcomes)


def map_jobs(
    func: Callable[[T], R],
    items: Sequence[T],
    workers: Optional[int] = None,
    label: str = "jobs",
) -> List[R]:
    return raise_first(JobManager(workers).run(func, items, label))
