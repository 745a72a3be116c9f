import json
from pathlib import Path

# a small synthetic run: about 15 months of training and six weeks of forecasts
TINY = {
    "data_dir": "data",
    "stablecoins": ["usd_a", "usd_b", "usd_c"],
    "cryptos": ["coin_a", "coin_b", "coin_c", "coin_d"],
    "train_start": "2020-01-01",
    "train_end": "2021-03-31",
    "test_end": "2021-05-15",
    "simulate_days": 500,
    "refit_every": 15,
    "garch_starts": 2,
    "horn_replications": 100,
    "cgc": {"n_bootstrap": 100},
    "gbt": {"grid": [{"n_trees": 50, "max_depth": 2, "learning_rate": 0.1}], "n_folds": 3},
    "seed": 11,
    "output_dir": "out",
}


def write_config(directory: Path, **overrides) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.json"
    path.write_text(json.dumps({**TINY, **overrides}, indent=2))
    return path


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
