from pathlib import Path

import pytest
import yaml

# a pipeline small enough to run end to end in a few seconds
TINY_PIPELINE = {
    "data": {"n_shapes": 6, "n_train": 4, "resolution": 16},
    "vae": {"channels": [16, 16, 16], "d_t": 8, "n_geom": 128, "n_phys": 128, "d_e": 32, "r": 2},
    "vae_train": {"steps": 20, "batch": 2, "n_query": 256, "n_supervision": 1024, "n_surface": 512},
    "diffusion": {"width": 16, "depth": 1, "heads": 2, "T": 50},
    "diffusion_train": {"steps": 50, "batch": 8},
    "latent_obj": {"channels": 8},
    "latent_obj_train": {"steps": 50},
    "gnn": {"hidden": 8, "blocks": 1},
    "gnn_train": {"steps": 20, "batch": 4},
    "design": {"n": 3, "grid_res": 16},
    "refine": {"steps": 10},
}


@pytest.fixture
def tiny_config(tmp_path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_PIPELINE))
    return path


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
