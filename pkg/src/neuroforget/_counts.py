import math


def ceil_count(fraction: float, total: int) -> int:
    """``ceil(fraction * total)`` clamped to [1, total].

    The product is rounded to 9 decimals first so that e.g. 0.07 * 100
    yields 7 rather than 8.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if total < 1:
        raise ValueError("total must be >= 1")
    return min(total, max(1, math.ceil(round(fraction * total, 9))))
