import numpy as np
import pytest

from biatten.tensor import Tensor, backward, mul, sum_all


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, arrays, seed=0, step=1e-4):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps a list of Tensors to a Tensor; the scalar probed is
    ``sum(fn(...) * R)`` for a fixed random R.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(leaves)
    weight = np.random.default_rng(seed + 10_000).standard_normal(out.shape)
    backward(sum_all(mul(out, Tensor(weight))))

    def value(vals):
        return float((fn([Tensor(v) for v in vals]).data * weight).sum())

    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[i][j] += step
            minus[i][j] -= step
            numeric[j] = (value(plus) - value(minus)) / (2 * step)
        worst = max(worst, rel_error(leaves[i].grad, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def model_gradcheck(model, hr, sr, seed=0, per_tensor=4, step=1e-4, training=True):
    """FD check of d(sum(w * scores))/d(params, inputs) on sampled coordinates.

    Attention scales are taken from the unperturbed pass and held fixed, since
    they are treated as constants by the analytic gradient.
    """
    from biatten.model import forward

    r = np.random.default_rng(seed)
    hr_t = Tensor(np.array(hr, dtype=np.float64), requires_grad=True)
    sr_t = Tensor(np.array(sr, dtype=np.float64), requires_grad=True)
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    scales: dict = {}
    out = forward(hr_t, sr_t, model, training=training, scales=scales)
    weight = r.standard_normal(out.shape)
    backward(sum_all(mul(out, Tensor(weight))))

    targets = dict(params)
    targets["input.hr"], targets["input.sr"] = hr_t, sr_t

    def value():
        return float((forward(Tensor(hr_t.data), Tensor(sr_t.data), model, training=training, scales=scales).data * weight).sum())

    analytic, numeric = [], []
    for name, t in targets.items():
        flat = t.data.reshape(-1)
        picks = r.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + step
            up = value()
            flat[k] = orig - step
            down = value()
            flat[k] = orig
            numeric.append((up - down) / (2 * step))
            analytic.append(t.grad.reshape(-1)[k])
    return rel_error(np.array(analytic), np.array(numeric))


ACCEPTANCE_LINES: list = []


def record_acceptance(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
