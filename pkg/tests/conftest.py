import numpy as np
import pytest

from porohyper.cell import SolidCellProblem
from porohyper.material import MaterialParams
from porohyper.mesh import generate_voxel_rve

ACCEPTANCE_RESULTS = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def rve8():
    return generate_voxel_rve(8, 0.2)


@pytest.fixture(scope="session")
def solid8(rve8):
    return SolidCellProblem(rve8[0], MaterialParams(0.35))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_PIPELINE = [
    ("rve", ["rve-gen", "--set", "geometry.resolution=8"]),
    ("fluid", ["cell-fluid", "--rve", "{rve}"]),
    ("solid", ["cell-solid", "--rve", "{rve}"]),
    ("sweep", ["rve-sweep", "--rve", "{rve}", "--fluid", "{fluid}", "--set", "sweep.num=3",
               "--set", "sweep.stop=-0.04"]),
    ("dataset", ["dataset", "--rve", "{rve}", "--set", "sampler.grad_range=[-0.06,0.02]",
                 "--set", "sampler.p_range=[0.0,0.03]", "--set", "sampler.grad_step=0.02",
                 "--set", "sampler.p_step=0.015"]),
    ("model", ["train", "--dataset", "{dataset}", "--set", "training.hidden_layer_sizes=[8]",
               "--set", "training.max_epochs=5000"]),
    ("ale", ["consolidate", "--rve", "{rve}", "--fluid", "{fluid}", "--model", "{model}", "--load", "-0.01",
             "--set", "macro.divisions=[1,4,1]", "--set", "macro.t_end=20", "--set", "macro.dt=2"]),
    ("linear", ["consolidate", "--rve", "{rve}", "--fluid", "{fluid}", "--solid", "{solid}", "--solver", "linear",
                "--load", "-0.01", "--set", "macro.divisions=[1,4,1]", "--set", "macro.t_end=20",
                "--set", "macro.dt=2"]),
    ("compare", ["compare", "--ale", "{ale}", "--linear", "{linear}"]),
]


@pytest.fixture(scope="session")
def small_pipeline(tmp_path_factory):
    """Every CLI stage on an n=8 cell; returns the output directory of each stage."""
    from porohyper.cli import main

    root = tmp_path_factory.mktemp("pipeline")
    dirs = {}
    for name, argv in SMALL_PIPELINE:
        out = root / name
        args = [a.format(**{k: str(v) for k, v in dirs.items()}) for a in argv] + ["--out", str(out)]
        assert main(args) == 0, name
        dirs[name] = out
    return dirs
