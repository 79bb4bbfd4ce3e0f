import hashlib
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, Sequence, TypeVar

import numpy as np

from errors import GtGuardError
from notifications import show_error_notification

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def safe_execute(func: Callable, error_context: str, *args, **kwargs) -> Any:
    """Execute a function safely, catching and logging any exceptions."""
    try:
        return func(*args, **kwargs)
    except GtGuardError as exc:
        show_error_notification(error_context, str(exc))
        return None
    except Exception as exc:
        error_msg = f"{error_context}: {exc}"
        logger.debug(traceback.format_exc())
        show_error_notification("Unexpected error", error_msg)
        return None


def derive_seed(master_seed: int, name: str) -> int:
    """Keyed sub-seed: adding a new named draw never perturbs the existing ones."""
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def spawn_generators(seed: int, count: int) -> List[np.random.Generator]:
    """Independent per-trial generators whose draws do not depend on execution order."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.default_rng(child) for child in children]


def parallel_map(func: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Map in input order; with workers > 1 the evaluations run on a thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
