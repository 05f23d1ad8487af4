"""Shared store for acceptance results, printed by the terminal-summary hook."""

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n], flush=True)
    return ok
