import os

# single-threaded, deterministic kernels for every test process
os.environ.setdefault("OMP_NUM_THREADS", "1")

import torch  # noqa: E402

torch.set_num_threads(1)

TITLES = {
    "1": "shape conformance",
    "2": "loss zero / closed-form cases",
    "3": "weight schedule",
    "4": "gradient checks",
    "5": "alternation isolation and teacher freeze",
    "6": "online feeding",
    "7": "metric oracles",
    "8": "desk-scale smoke training",
    "9": "determinism",
}

# criterion -> [ok, [details]]
ACCEPTANCE: dict[str, list] = {}


def record(criterion: str, ok: bool, detail: str):
    entry = ACCEPTANCE.setdefault(criterion, [True, []])
    entry[0] = entry[0] and bool(ok)
    entry[1].append(f"{'ok' if ok else 'FAILED'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(TITLES, key=int):
        if key not in ACCEPTANCE:
            tr.write_line(f"[NOT RUN] criterion {key}: {TITLES[key]}")
            continue
        ok, details = ACCEPTANCE[key]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {TITLES[key]} -- {'; '.join(details)}")
