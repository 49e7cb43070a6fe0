# loader.py - Feature loading ahead of the training loop
# A bounded thread pool runs up to `prefetch` loads ahead of the consumer;
# results come back in input order.
from collections import deque
from concurrent.futures import ThreadPoolExecutor


def prefetch_map(fn, items, workers=1, prefetch=8):
    """Yield fn(item) for each item, in order, with bounded lookahead."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return

    pending = deque()
    with ThreadPoolExecutor(max_workers=workers) as executor:
        for item in items:
            pending.append(executor.submit(fn, item))
            if len(pending) >= prefetch:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def load_all(fn, items, cfg):
    """Materialize prefetch_map under a LoaderConfig."""
    return list(prefetch_map(fn, items, workers=cfg.workers, prefetch=cfg.prefetch))
