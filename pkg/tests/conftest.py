import numpy as np
import pytest
import torch

from mean_cvgl.config import BackboneSpec, ModelConfig, TrainConfig, preset
from mean_cvgl.data import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)

# -- acceptance summary: one line per criterion, whatever the capture mode ----------

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    entry = _ACCEPTANCE.setdefault(mark.args[0], {"checks": {}, "details": [], "skip": None})
    if rep.skipped:
        entry["skip"] = str(rep.longrepr[-1]).replace("Skipped: ", "")
        return
    prev = entry["checks"].get(item.name, True)
    entry["checks"][item.name] = prev and rep.passed
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        if e["skip"] and not e["checks"]:
            tr.write_line(f"criterion {n}: NOT REPRODUCIBLE  {e['skip']}")
            continue
        ok = all(e["checks"].values())
        failed = [k for k, v in e["checks"].items() if not v]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  ({len(e['checks'])} checks)"
        if failed:
            line += "  failed: " + ", ".join(failed)
        if e["details"]:
            line += "  " + "; ".join(e["details"])
        tr.write_line(line)


def central_difference(fn, tensors, h=1e-6, coords=None):
    """Numerical gradient of scalar ``fn()`` w.r.t. selected elements of ``tensors``.

    ``coords`` is a list of (tensor_index, flat_index); default is every
    element. Tensors are perturbed in place under no_grad and restored.
    """
    if coords is None:
        coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.numel())]
    out = np.empty(len(coords))
    with torch.no_grad():
        for n, (i, j) in enumerate(coords):
            flat = tensors[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            plus = float(fn())
            flat[j] = orig - h
            minus = float(fn())
            flat[j] = orig
            out[n] = (plus - minus) / (2 * h)
    return out


def analytic_gradient(fn, tensors, coords=None):
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad if t.grad is not None else torch.zeros_like(t) for t in tensors]
    if coords is None:
        return np.concatenate([g.reshape(-1).numpy() for g in grads])
    return np.array([grads[i].reshape(-1)[j].item() for i, j in coords])


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(fn, tensors, coords=None, h=1e-6):
    """Relative error between autograd and central differences."""
    return relative_error(analytic_gradient(fn, tensors, coords), central_difference(fn, tensors, h, coords))


def sample_coords(tensors, n, rng):
    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    flat = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    coords = []
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((i, int(f - offsets[i])))
    return coords


def toy_model_config(**kw) -> ModelConfig:
    base = dict(backbone=BackboneSpec("toy", (1, 1, 1), (16, 32, 64), 64), num_classes=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def toy_config() -> TrainConfig:
    return preset("toy")


@pytest.fixture(scope="session")
def synthetic8():
    return generate_synthetic(SyntheticSpec(num_classes=8, drone_per_class=4, resolution=64, seed=7))


@pytest.fixture(scope="session")
def trained_toy(synthetic8):
    """The default toy run (200 steps) on the 8-class synthetic set, shared across tests."""
    from mean_cvgl.trainer import fit

    cfg = preset("toy")
    cfg.eval_every = 100
    return fit(cfg, synthetic8.train, synthetic8.store)
