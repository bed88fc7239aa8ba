import functools
import os
import threading
from typing import Any, Callable, Iterable, List, Optional, TypeVar, Union

import torch


T = TypeVar("T")
F = TypeVar("F", bound=Callable[..., Any])


def threadable(func: F) -> F:
    """Allows the function to be ran as a thread using the 'threaded' argument"""

    def wrapped(*args: Any, threaded: bool = False, **kwargs: Any) -> Union[threading.Thread, Any]:
        if threaded:
            thread = threading.Thread(target=func, args=args, kwargs=kwargs)
            thread.start()
            return thread

        return func(*args, **kwargs)

    wrapped._threadable = True  # type: ignore[attr-defined]
    return functools.wraps(func)(wrapped)  # type: ignore[return-value]


class Workers:
    """Process-wide worker settings"""

    def __init__(self, threads: int = 1):
        self._lock = threading.Lock()
        self.threads = threads

    @property
    def threads(self) -> int:
        return self._threads

    @threads.setter
    def threads(self, value: int) -> None:
        with self._lock:
            self._threads = max(1, int(value))
        # parallelism lives in the pools below; torch stays single-threaded
        torch.set_num_threads(1)


workers = Workers(int(os.environ.get("SCV2_THREADS", "1") or 1))


def set_threads(value: int) -> None:
    """Sets the number of worker threads used by every parallel stage"""
    workers.threads = value


class ThreadPool:
    """Bounded pool that runs zero-argument tasks and returns their results in submission order"""

    def __init__(self, maximum: Optional[int] = None):
        self.maximum = maximum or workers.threads
        self._tasks: List[Callable[[], Any]] = []

    def add_task(self, task: Callable[[], Any]) -> None:
        self._tasks.append(task)

    def start(self) -> List[Any]:
        """Runs every queued task and returns the results in the order the tasks were added.

        Raises:
            Exception: the first failure in submission order is re-raised after all threads finish
        """

        tasks, self._tasks = self._tasks, []
        results: List[Any] = [None] * len(tasks)
        errors: List[Optional[BaseException]] = [None] * len(tasks)
        if self.maximum <= 1 or len(tasks) <= 1:
            for i, task in enumerate(tasks):
                results[i] = task()
            return results

        cursor = iter(range(len(tasks)))
        cursor_lock = threading.Lock()

        def worker() -> None:
            while True:
                with cursor_lock:
                    i = next(cursor, None)
                if i is None:
                    return
                try:
                    results[i] = tasks[i]()
                except BaseException as e:  # noqa: BLE001
                    errors[i] = e

        threads = [threading.Thread(target=worker) for _ in range(min(self.maximum, len(tasks)))]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        for error in errors:
            if error is not None:
                raise error
        return results


def parallel_map(func: Callable[[Any], T], items: Iterable[Any], maximum: Optional[int] = None) -> List[T]:
    """Applies func to every item on the global pool, preserving order"""
    pool = ThreadPool(maximum)
    for item in items:
        pool.add_task(functools.partial(func, item))
    return pool.start()
