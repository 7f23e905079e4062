"""
Reference implementations for the test suite

Everything here works on plain float64 numpy arrays with explicit loops and
shares no code with the pipeline; tests feed both sides the same weights
and compare. Slow by construction.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd
import torch

from ..errors import NonFiniteLossError, ValidationError

logger = logging.getLogger(__name__)

GRAD_REL_TOL = 1e-4
TABLE_TOL = 0.02

# per-order fixture file -> method name used in the printed tables
PUBLISHED_METHODS = {
    "fine_tune": "Fine-tune",
    "ewc": "EWC",
    "l2p": "L2P",
    "s_prompt": "S-prompt",
    "dualprompt": "Dualprompt",
    "pc": "PC",
    "dcnet": "DCNet",
}


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class ParamCheck:
    param_name: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float


@dataclass
class GradCheckReport:
    checks: List[ParamCheck] = field(default_factory=list)
    threshold: float = GRAD_REL_TOL

    @property
    def max_rel_err(self):
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def failures(self):
        return [c.param_name for c in self.checks if c.max_rel_err > self.threshold]

    @property
    def passed(self):
        return not self.failures

    def __getitem__(self, name):
        for c in self.checks:
            if c.param_name == name:
                return c
        raise KeyError(name)

    def summary(self):
        return ", ".join(f"{c.param_name}={c.max_rel_err:.2e}" for c in self.checks)


def _finite(value, where):
    if not math.isfinite(value):
        raise NonFiniteLossError(f"Non-finite loss {value} {where}")
    return value


def finite_diff_grad(loss_fn, params, h=1e-4, threshold=GRAD_REL_TOL):
    """
    Compare autograd against central differences, coordinate by coordinate

    loss_fn maps {name: float64 tensor} to a scalar tensor and must be pure.
    """
    base = {name: torch.as_tensor(np.asarray(p, dtype=np.float64) if not torch.is_tensor(p) else p)
            .detach().to(torch.float64).clone() for name, p in params.items()}

    leaves = {name: t.clone().requires_grad_(True) for name, t in base.items()}
    loss = loss_fn(leaves)
    _finite(float(loss), "at the base point")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)

    report = GradCheckReport(threshold=threshold)
    for name, grad in zip(names, grads):
        analytic = np.zeros(base[name].shape) if grad is None else grad.detach().numpy().astype(np.float64)
        numeric = np.zeros(base[name].numel())
        flat = base[name].reshape(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                f_plus = _finite(float(loss_fn(base)), f"at {name}[{i}] + h")
                flat[i] = orig - h
                f_minus = _finite(float(loss_fn(base)), f"at {name}[{i}] - h")
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2.0 * h)
        numeric = numeric.reshape(base[name].shape)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        report.checks.append(ParamCheck(name, analytic, numeric, float(rel.max()) if rel.size else 0.0))
    logger.debug(f"Gradient check: {report.summary()}")
    return report


# ---------------------------------------------------------------------------
# attention and prompt generation

def _linear(W, b, x):
    out = []
    for i in range(W.shape[0]):
        acc = 0.0 if b is None else float(b[i])
        for j in range(W.shape[1]):
            acc += float(W[i, j]) * float(x[j])
        out.append(acc)
    return out


def naive_attention(tokens, weights, heads=1):
    """
    Scalar-loop multi-head attention before the output projection

    weights: {"q.weight", "q.bias", "k.weight", ...} as arrays.
    Returns (output [N, d], probabilities [heads, N, N]).
    """
    x = np.asarray(tokens, dtype=np.float64)
    N, d = x.shape
    hd = d // heads
    w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    q = [_linear(w["q.weight"], w.get("q.bias"), x[i]) for i in range(N)]
    k = [_linear(w["k.weight"], w.get("k.bias"), x[i]) for i in range(N)]
    v = [_linear(w["v.weight"], w.get("v.bias"), x[i]) for i in range(N)]

    out = np.zeros((N, d))
    probs = np.zeros((heads, N, N))
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        for i in range(N):
            scores = []
            for j in range(N):
                s = 0.0
                for c in range(lo, hi):
                    s += q[i][c] * k[j][c]
                scores.append(s / math.sqrt(hd))
            p = _softmax_row(scores)
            for j in range(N):
                probs[h, i, j] = p[j]
                for c in range(lo, hi):
                    out[i, c] += p[j] * v[j][c]
    return out, probs


def naive_summarize(tokens, pool, weights, heads=1):
    """Mean over rows of x + O(attention(x)) with x = [tokens; pool]"""
    x = np.concatenate([np.asarray(tokens, dtype=np.float64), np.asarray(pool, dtype=np.float64)], axis=0)
    att, _ = naive_attention(x, weights, heads)
    W_o, b_o = np.asarray(weights["o.weight"], dtype=np.float64), weights.get("o.bias")
    rows = [x[i] + np.array(_linear(W_o, b_o, att[i])) for i in range(x.shape[0])]
    return np.mean(rows, axis=0)


def naive_generate(summary, delta_s, pool, length):
    """(G [n, d], mixture weights [n, L]) from a summary vector"""
    P = np.asarray(pool, dtype=np.float64)
    L = P.shape[0]
    logits = _linear(np.asarray(delta_s, dtype=np.float64), None, summary)
    weights = np.array([_softmax_row(logits[r * L:(r + 1) * L]) for r in range(length)])
    G = np.zeros((length, P.shape[1]))
    for r in range(length):
        for l in range(L):
            G[r] += weights[r, l] * P[l]
    return G, weights


# ---------------------------------------------------------------------------
# modality-aggregating adapter

def naive_gru_step(x, h, weight_ih, weight_hh, bias_ih, bias_hh):
    """One GRU step with gates ordered (reset, update, new)"""
    H = len(h)
    gi = _linear(np.asarray(weight_ih), np.asarray(bias_ih), x)
    gh = _linear(np.asarray(weight_hh), np.asarray(bias_hh), h)
    h_new = []
    for j in range(H):
        r = _sigmoid(gi[j] + gh[j])
        z = _sigmoid(gi[H + j] + gh[H + j])
        n = math.tanh(gi[2 * H + j] + r * gh[2 * H + j])
        h_new.append((1.0 - z) * n + z * h[j])
    return h_new


def naive_tma_maps(video, audio, w):
    """
    All six maps for one clip; video [T, S_v, C], audio [T, S_a, C]

    w holds the adapter's state_dict arrays. Returns a dict with
    m_vc, m_ac [C], m_vs [S_v], m_as [S_a], m_vt, m_at [T].
    """
    v, a = np.asarray(video, dtype=np.float64), np.asarray(audio, dtype=np.float64)
    T = v.shape[0]
    phi_v, phi_a = v.mean(axis=(0, 1)), a.mean(axis=(0, 1))

    def chain(W1, W2, x):
        return [_sigmoid(z) for z in _linear(w[W2], None, _linear(w[W1], None, x))]

    def temporal(stream, rnn, head):
        h = [0.0] * w[f"{rnn}.weight_hh_l0"].shape[1]
        out = []
        for t in range(T):
            h = naive_gru_step(stream[t].mean(axis=0), h, w[f"{rnn}.weight_ih_l0"], w[f"{rnn}.weight_hh_l0"],
                               w[f"{rnn}.bias_ih_l0"], w[f"{rnn}.bias_hh_l0"])
            out.append(_sigmoid(_linear(w[f"{head}.weight"], None, h)[0]))
        return out

    return {
        "m_vc": np.array(chain("delta_v.weight", "w_v.weight", phi_a)),
        "m_ac": np.array(chain("delta_a.weight", "w_a.weight", phi_v)),
        "m_vs": np.array([_sigmoid(z) for z in _linear(w["psi_a.weight"], None, phi_a)]),
        "m_as": np.array([_sigmoid(z) for z in _linear(w["psi_v.weight"], None, phi_v)]),
        "m_vt": np.array(temporal(a, "rnn_a", "gamma_a")),
        "m_at": np.array(temporal(v, "rnn_v", "gamma_v")),
    }


def naive_fuse(tokens, m_c, m_s, m_t, alpha, beta, gamma, residual=False):
    """Triple loop: out[t, s, c] = (alpha*M_c[c] + beta*M_s[s] + gamma*M_t[t]) * x[t, s, c]"""
    x = np.asarray(tokens, dtype=np.float64)
    T, S, C = x.shape
    out = np.zeros_like(x)
    for t in range(T):
        for s in range(S):
            for c in range(C):
                g = alpha * m_c[c] + beta * m_s[s] + gamma * m_t[t]
                out[t, s, c] = g * x[t, s, c] + (x[t, s, c] if residual else 0.0)
    return out


# ---------------------------------------------------------------------------
# heads and prediction

def naive_mlp(x, w1, b1, w2, b2):
    hidden = [max(0.0, z) for z in _linear(np.asarray(w1), np.asarray(b1), x)]
    return np.array(_linear(np.asarray(w2), np.asarray(b2), hidden))


def naive_contrastive_loss(features, texts, tau):
    """0.5 * (row cross-entropy + column cross-entropy) over dot products / tau"""
    Fm, Tm = np.asarray(features, dtype=np.float64), np.asarray(texts, dtype=np.float64)
    N = Fm.shape[0]
    logits = [[float(Fm[i] @ Tm[j]) / tau for j in range(N)] for i in range(N)]
    row = -sum(math.log(_softmax_row(logits[i])[i]) for i in range(N)) / N
    col = -sum(math.log(_softmax_row([logits[j][i] for j in range(N)])[i]) for i in range(N)) / N
    return 0.5 * (row + col)


def brute_force_argmax(F_v, F_a, T_v, T_a):
    """Class with the highest mean of video and audio similarity; lowest id on ties"""
    preds = []
    for i in range(len(F_v)):
        best, best_k = -math.inf, 0
        for k in range(len(T_v)):
            score = 0.5 * (float(np.dot(F_v[i], T_v[k])) + float(np.dot(F_a[i], T_a[k])))
            if score > best:
                best, best_k = score, k
        preds.append(best_k)
    return np.array(preds)


def nearest_class_mean_accuracy(train_x, train_y, test_x, test_y):
    """Percent accuracy of a nearest-class-mean classifier on flattened features"""
    train_x = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    test_x = np.asarray(test_x, dtype=np.float64).reshape(len(test_x), -1)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    if train_y.ndim != 1:
        raise ValidationError("nearest-class-mean needs single-label targets")
    classes = np.unique(train_y)
    means = np.stack([train_x[train_y == k].mean(axis=0) for k in classes])
    dists = ((test_x[:, None, :] - means[None, :, :]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(dists, axis=1)]
    return 100.0 * float((pred == test_y).mean())


# ---------------------------------------------------------------------------
# printed-table recomputation

@dataclass
class TableRecomputation:
    recomputed: pd.DataFrame
    printed: pd.DataFrame
    discrepancies: List[Dict] = field(default_factory=list)

    def cells(self, method=None):
        return {(d["method"], d["column"]) for d in self.discrepancies if method in (None, d["method"])}


def _recompute_method(frame):
    """Per-task and mean cells from one wide per-order table"""
    pos_cols = [c for c in frame.columns if c.startswith("pos")]
    stats = {}
    for label, group in frame.groupby("order", sort=False):
        order = label.split("->")
        S = len(order)
        grid = group.sort_values("stage")[pos_cols].to_numpy(dtype=np.float64)
        first = grid[:, 0]
        s = stats.setdefault(order[0], {"A_mean": [], "A_final": [], "F_mean": [], "A_single": []})
        s["A_mean"].append(first.mean())
        s["A_final"].append(first[-1])
        s["F_mean"].append((first[0] - first[-1]) / (S - 1))
        s["A_single"].append(first[0])
        stats.setdefault(order[-1], {"A_mean": [], "A_final": [], "F_mean": [], "A_single": []}) \
            .setdefault("A_multi", []).append(grid[-1, S - 1])

    tasks = list(stats)
    cells = {}
    for task in tasks:
        for key, values in stats[task].items():
            cells[f"{task}.{key}"] = float(np.mean(values))
    for key in ("A_mean", "A_final", "F_mean", "A_single", "A_multi"):
        cells[f"mean.{key}"] = float(np.mean([cells.get(f"{t}.{key}", np.nan) for t in tasks]))
    return cells


def _diff(a_single, a_multi, eps=0.001):
    return (a_multi - a_single) / max(100.0 - a_single, eps) * (1.0 + a_single / 100.0) ** 2 * 100.0


def recompute_published_tables(fixtures_dir, tol=TABLE_TOL):
    """
    Recompute every printed aggregate from the per-order stage tables

    Diff is recomputed from the printed mean A_single / A_multi, the inputs
    a reader of the printed table has. Cells off by more than `tol` are
    listed in the report's discrepancies.
    """
    fixtures_dir = Path(fixtures_dir)
    t1_path, t2_path = fixtures_dir / "printed_table1.csv", fixtures_dir / "printed_table2.csv"
    for path in (t1_path, t2_path):
        if not path.exists():
            raise ValidationError(f"Missing fixture {path}")
    printed = pd.read_csv(t1_path).merge(pd.read_csv(t2_path), on="method", how="outer").set_index("method")

    rows = {}
    for key, method in PUBLISHED_METHODS.items():
        path = fixtures_dir / f"per_order_{key}.csv"
        if not path.exists():
            raise ValidationError(f"Missing fixture {path}")
        cells = _recompute_method(pd.read_csv(path))
        if method in printed.index:
            cells["Diff"] = _diff(printed.loc[method, "mean.A_single"], printed.loc[method, "mean.A_multi"])
        rows[method] = cells
    recomputed = pd.DataFrame.from_dict(rows, orient="index")

    report = TableRecomputation(recomputed=recomputed, printed=printed)
    for method in recomputed.index:
        if method not in printed.index:
            continue
        for column in printed.columns:
            if column not in recomputed.columns:
                continue
            p, r = printed.loc[method, column], recomputed.loc[method, column]
            if pd.isna(p) or pd.isna(r):
                continue
            if abs(r - p) > tol:
                report.discrepancies.append({"method": method, "column": column,
                                             "printed": float(p), "recomputed": float(r)})
    return report
