import asyncio
import logging
from concurrent.futures import Executor, ProcessPoolExecutor
from typing import Awaitable, List, Optional

from prometheus_client import Counter, Gauge

from graph_moe.tasks.task import T, Task, describe_tasks
from graph_moe.utils import tqdm_gather

worker_tasks_in_progress = Gauge(
    "graph_moe_taskworker_tasks_in_progress",
    "Number of tasks currently in progress"
)
worker_tasks_failed = Counter(
    "graph_moe_taskworker_tasks_failed_total",
    "Number of tasks which raised an exception"
)

logger = logging.getLogger(__name__)


class Bottleneck:

    def __init__(self, num_concurrent: int):
        self.num_concurrent = num_concurrent
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._semaphore_loop: Optional[asyncio.AbstractEventLoop] = None

    @property
    def semaphore(self) -> asyncio.Semaphore:
        # A semaphore binds to the loop it first waits on, and every run_all call starts a new loop
        loop = asyncio.get_running_loop()
        if self._semaphore is None or self._semaphore_loop is not loop:
            self._semaphore = asyncio.Semaphore(self.num_concurrent)
            self._semaphore_loop = loop
        return self._semaphore

    async def await_run(self, awaitable: Awaitable[T]) -> T:
        async with self.semaphore:
            return await awaitable


class TaskWorker(Bottleneck):
    """
    Runs tasks with at most num_concurrent in flight. With one slot, tasks run inline in this process; with more,
    they are handed to a process pool so seeds train in parallel with isolated state.
    """

    def __init__(self, num_concurrent: int = 1, executor: Optional[Executor] = None):
        if num_concurrent < 1:
            raise ValueError(f"Task worker needs at least one slot, got {num_concurrent}")
        super().__init__(num_concurrent)
        self.executor = executor
        self.current_tasks: List[Task] = []

    @classmethod
    def with_workers(cls, workers: int) -> "TaskWorker":
        if workers <= 1:
            return cls(1)
        return cls(workers, ProcessPoolExecutor(max_workers=workers))

    def _log_tasks(self) -> None:
        logger.debug("TaskWorker current tasks (%s):%s", len(self.current_tasks), describe_tasks(self.current_tasks))

    async def _run_task(self, task: Task[T]) -> T:
        self.current_tasks.append(task)
        self._log_tasks()
        logger.debug("Starting task: %s", task)
        try:
            return await task.run(self.executor)
        except Exception:
            worker_tasks_failed.inc()
            raise
        finally:
            self.current_tasks.remove(task)
            logger.debug("Finished task: %s", task)

    async def await_task(self, task: Task[T]) -> T:
        with worker_tasks_in_progress.track_inprogress():
            return await self.await_run(self._run_task(task))

    async def await_tasks(self, tasks: List[Task[T]], desc: str = "tasks") -> List[T]:
        return await tqdm_gather([self.await_task(task) for task in tasks], desc=desc, leave=False)

    def run_all(self, tasks: List[Task[T]], desc: str = "tasks") -> List[T]:
        """Blocking entry point for the synchronous command layer."""
        return asyncio.run(self.await_tasks(tasks, desc))

    def shutdown(self) -> None:
        if self.executor is not None:
            self.executor.shutdown()
            self.executor = None
