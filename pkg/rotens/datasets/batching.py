import threading
from queue import Queue
from typing import Iterable, Iterator

import numpy as np

from ..tensor import Tensor
from .base import Dataset

Batch = tuple[Tensor, np.ndarray]

PREFETCH_DEPTH = 4
_DONE = object()


def epoch_order(count: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(count)


def batches(d: Dataset, batch_size: int, shuffle_seed: int, epoch: int) -> Iterator[Batch]:
    """Shuffled mini-batches for one epoch; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    order = epoch_order(len(d), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        chosen = order[start : start + batch_size]
        yield Tensor(d.images[chosen], copy=False), d.labels[chosen]


def sequential_batches(d: Dataset, batch_size: int) -> Iterator[Batch]:
    for start in range(0, len(d), batch_size):
        yield Tensor(d.images[start : start + batch_size], copy=False), d.labels[start : start + batch_size]


def prefetch(source: Iterable[Batch], depth: int = PREFETCH_DEPTH) -> Iterator[Batch]:
    """
    Produce items of source on a background thread, at most depth ahead of
    the consumer. Exceptions raised by source are re-raised here.
    """
    queue: Queue = Queue(maxsize=depth)
    stop = threading.Event()

    def produce():
        try:
            for item in source:
                if stop.is_set():
                    return
                queue.put(item)
        except BaseException as e:  # handed to the consumer
            queue.put(e)
            return
        queue.put(_DONE)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = queue.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        # Unblock a producer waiting on a full queue
        while worker.is_alive():
            while not queue.empty():
                queue.get_nowait()
            worker.join(timeout=0.05)
