"""Collects one verdict per acceptance criterion for the end-of-run summary."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    RESULTS[number] = (bool(ok), title, detail)
    print(f"{'PASS' if ok else 'FAIL'}  [{number}] {title}: {detail}")
    return ok
