import json
from abc import ABC, abstractmethod
from concurrent.futures import Executor
from typing import Dict, Generic, List, Optional, TypeVar

T = TypeVar("T")


class TaskException(Exception):
    pass


class Task(ABC, Generic[T]):
    """A unit of work for the task worker. Runs inline, or hands its payload to the given executor."""

    def __init__(self, *, description: Optional[str] = None) -> None:
        self.description = description

    @abstractmethod
    async def run(self, executor: Optional[Executor] = None) -> T:
        pass

    @abstractmethod
    def _task_args(self) -> Dict[str, object]:
        raise NotImplementedError

    def __repr__(self) -> str:
        args = {"description": self.description, **self._task_args()}
        args_str = ", ".join(f"{name}={json.dumps(value)}" for name, value in args.items())
        return f"{self.__class__.__name__}({args_str})"


def describe_tasks(tasks: List[Task]) -> str:
    return "".join("\n" + repr(task) for task in tasks)
