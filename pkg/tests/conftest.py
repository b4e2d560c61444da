import copy
from pathlib import Path

import pytest
import yaml

TINY_STACK = {"base_channels": 4, "channel_multipliers": [1, 2, 2], "blocks_per_stage": 1, "use_attention_at": []}

TINY = {
    "data": {"size": 16, "count": 20, "fractions": [0.6, 0.2, 0.2]},
    "vae": {
        "image": {"stack": TINY_STACK, "epochs": 1, "batch_size": 4},
        "mask": {"stack": TINY_STACK, "epochs": 1, "batch_size": 4},
    },
    "flow": {
        "stack": {"base_channels": 4, "channel_multipliers": [1, 2], "blocks_per_stage": 1, "use_attention_at": [1]},
        "time_embedding_dim": 8,
        "epochs": 1,
        "batch_size": 4,
    },
    "sample": {"steps": 3, "n": 3},
}


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def write_config(root: Path, values: dict, name: str = "config.yaml") -> Path:
    values = merge(values, {"paths": {
        "data_dir": str(root / "data"),
        "checkpoint_dir": str(root / "checkpoints"),
        "output_dir": str(root / "outputs"),
    }})
    path = root / name
    path.write_text(yaml.safe_dump(values))
    return path


@pytest.fixture
def tiny_config(tmp_path):
    """Factory writing a fast config rooted in ``tmp_path``; keyword dicts override sections."""

    def make(**over):
        return write_config(tmp_path, merge(TINY, over))

    return make


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion covered by the test")
    config._criteria = {}
    config._criteria_notes = {}


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion line of the terminal summary."""
    cid = request.node.get_closest_marker("criterion").args[0]
    return lambda text: request.config._criteria_notes.setdefault(cid, []).append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    results = item.config._criteria.setdefault(mark.args[0], [])
    results.append(report.passed)


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(criteria):
        status = "PASS" if all(criteria[cid]) else "FAIL"
        notes = "; ".join(config._criteria_notes.get(cid, []))
        terminalreporter.write_line(f"{cid} {status}" + (f"  ({notes})" if notes else ""))
