"""Per-criterion outcome collector shared by the acceptance tests and conftest."""

import functools
import time

TITLES = {
    1: "gradient oracle",
    2: "mask and leakage",
    3: "routing equivalence",
    4: "flow identities",
    5: "desk-scale learning",
    6: "freezing contract",
    7: "published constants",
    8: "persistence",
    9: "ablation harness",
}

# criterion -> list of (test name, passed, detail)
RESULTS: dict[int, list] = {}


def criterion(n: int):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS.setdefault(n, []).append((fn.__name__, False, f"{type(exc).__name__}: {exc}".splitlines()[0]))
                raise
            extra = f"; {detail}" if detail else ""
            RESULTS.setdefault(n, []).append((fn.__name__, True, f"{time.perf_counter() - t0:.1f}s{extra}"))

        return run

    return wrap


def summary_lines() -> list[str]:
    lines = []
    for n, title in TITLES.items():
        runs = RESULTS.get(n)
        if not runs:
            lines.append(f"criterion {n} ({title}): NOT RUN")
            continue
        ok = all(p for _, p, _ in runs)
        details = " | ".join(f"{name}: {d}" for name, _, d in runs)
        lines.append(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'} [{details}]")
    return lines
