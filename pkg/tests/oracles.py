"""Reference implementations used only by the tests.

Nothing here calls autograd or the package's own forward code; every oracle
recomputes its quantity from plain numpy or from repeated scalar evaluations.
"""

import numpy as np
import torch


def central_diff(f, x: np.ndarray, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (all coords or a subset of flat indices)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


def param_fd(model, loss_of_params, name, eps=1e-5, coords=None):
    """FD gradient of ``loss_of_params(params_dict)`` with respect to one parameter tensor."""
    base = {k: v.detach().clone() for k, v in model.params.items()}

    def f(arr):
        p = dict(base)
        p[name] = torch.from_numpy(arr)
        with torch.no_grad():
            return float(loss_of_params(p))

    return central_diff(f, base[name].numpy(), eps, coords)


def np_log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def np_cross_entropy(logits, labels) -> float:
    """-(1/B) sum_i log softmax(z_i)[y_i], summed term by term."""
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=np.float64), labels):
        m = max(row)
        total += -(row[y] - m - np.log(sum(np.exp(v - m) for v in row)))
    return total / len(labels)


def np_dense(x, w, b):
    """Row-by-row dot products, no matrix kernels."""
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for j in range(w.shape[0]):
            out[i, j] = sum(float(x[i, k]) * float(w[j, k]) for k in range(w.shape[1])) + float(b[j])
    return out


def np_mlp_forward(params: dict, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    p = {k: v.detach().numpy() for k, v in params.items()}
    h = np.maximum(np_dense(h, p["hidden0.weight"], p["hidden0.bias"]), 0)
    h = np.maximum(np_dense(h, p["hidden1.weight"], p["hidden1.bias"]), 0)
    return np_dense(h, p["head.weight"], p["head.bias"])


def cosine_oracle(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = np.sqrt(sum(float(x) ** 2 for x in a))
    nb = np.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def sort_oracle(losses, labels, r, mode):
    """Brute-force core-set: per class sort (loss, index) pairs and take int(r * n_c)."""
    kept = []
    for c in sorted(set(labels)):
        members = [(losses[i], i) for i in range(len(labels)) if labels[i] == c]
        if mode == "easy":
            members.sort(key=lambda t: (t[0], t[1]))
        else:
            members.sort(key=lambda t: (-t[0], t[1]))
        n = len(members) if r >= 1.0 else int(r * len(members))
        kept += [i for _, i in members[:n]]
    return sorted(kept)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def probe_losses(model, images, labels) -> list[float]:
    """Per-sample cross-entropy of a LinearProbe computed with plain numpy."""
    w = model.params["head.weight"].detach().numpy()
    b = model.params["head.bias"].detach().numpy()
    z = np.asarray(images, dtype=np.float64).reshape(len(images), -1) @ w.T + b
    return [-float(row[y]) for row, y in zip(np_log_softmax(z), labels)]


def random_prune_case(seed: int):
    """A random (dataset, LinearProbe scorer, r, mode) draw plus the oracle's core-set."""
    from cdstl.data import LabeledDataset
    from cdstl.nncore import build_model

    g = np.random.default_rng(seed)
    k = int(g.integers(2, 6))
    sizes = g.integers(1, 30, size=k)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    g.shuffle(labels)
    images = g.uniform(size=(labels.size, 1, 4, 4))
    if g.uniform() < 0.3:
        # duplicated images give exactly tied losses
        images[1::2] = images[0]
    ds = LabeledDataset(images, labels, k)
    scorer = build_model("LinearProbe", (1, 4, 4), k, seed=int(g.integers(0, 2**31)))
    r = float(g.choice([g.uniform(0.01, 1.0), 1.0, 0.5, 0.2, 0.6]))
    mode = str(g.choice(["easy", "hard"]))
    losses = probe_losses(scorer, images, labels)
    return ds, scorer, r, mode, losses, sort_oracle(losses, labels.tolist(), r, mode)


def check_boundaries(kept, losses, labels, mode) -> bool:
    kept = set(int(i) for i in kept)
    for c in set(labels):
        members = [i for i in range(len(labels)) if labels[i] == c]
        inside = [losses[i] for i in members if i in kept]
        outside = [losses[i] for i in members if i not in kept]
        if not inside or not outside:
            continue
        if mode == "easy" and max(inside) > min(outside):
            return False
        if mode == "hard" and min(inside) < max(outside):
            return False
    return True
