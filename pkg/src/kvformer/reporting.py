"""CSV logs, attention-map export and the cost table."""
from __future__ import annotations

import ast
import operator
from pathlib import Path

import numpy as np

from .attention import COST_CSV_HEADER, AttentionKind, count_cost
from .model import TransformerModel, forward
from .tensor import no_grad

REFERENCE_CSV_HEADER = "kind,flops_formula,params_formula,n,d,m,flops,params"

# Closed forms as printed in the comparison table, evaluated independently of count_cost.
TABLE1_FORMULAS = {
    "qkv": ("2*n*d**2", "2*d**2"),
    "kvpos": ("n*d**2 + n**2*m", "d**2 + m"),
    "kv": ("n*d**2", "d**2"),
}


class CsvLog:
    """Append-only CSV file that flushes after every row."""

    def __init__(self, path, header: str):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._fh.write(header + "\n")
        self._fh.flush()

    def write(self, row: str):
        self._fh.write(row + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_matrix_csv(path, matrix: np.ndarray):
    rows = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(matrix)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_pgm(path, weights: np.ndarray):
    """Plain (P2) graymap; ``[0, max]`` maps linearly to white..black."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    top = w.max()
    scaled = w / top if top > 0 else np.zeros_like(w)
    pixels = np.rint(255 * (1.0 - scaled)).astype(int)
    h, wd = pixels.shape
    lines = ["P2", f"{wd} {h}", "255"] + [" ".join(map(str, row)) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError(f"{path} is not a plain graymap")
    wd, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + wd * h], dtype=int).reshape(h, wd)


def export_attention_map(model: TransformerModel, tokens, layer: int, head: int, path) -> dict:
    """Write post-softmax weights (CSV + PGM) and pre-softmax scores (CSV) for one head.

    ``path`` is a prefix: files ``<path>.csv``, ``<path>.pgm`` and
    ``<path>.scores.csv`` are produced. Returns the written paths.
    """
    layers = model.attention_layers()
    if not -len(layers) <= layer < len(layers):
        raise IndexError(f"layer {layer} out of range for {len(layers)} layers")
    if not 0 <= head < model.config.n_heads:
        raise IndexError(f"head {head} out of range for {model.config.n_heads} heads")
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    with no_grad():
        forward(model, tokens)
    attn = layers[layer]
    weights = attn.last_weights[0, head]
    scores = attn.last_scores[0, head]
    prefix = Path(path)
    out = {
        "weights": prefix.with_name(prefix.name + ".csv"),
        "pgm": prefix.with_name(prefix.name + ".pgm"),
        "scores": prefix.with_name(prefix.name + ".scores.csv"),
    }
    write_matrix_csv(out["weights"], weights)
    write_pgm(out["pgm"], weights)
    write_matrix_csv(out["scores"], scores)
    return out


def _unpack(config):
    kind, n, d, H, *rest = config
    return kind, n, d, H, (rest[0] if rest else kind.m)


def emit_cost_table(configs) -> str:
    """CSV text, one row per ``(kind, n, d, H[, m])`` configuration.

    An explicit ``m`` overrides the kind's table depth and may be 0.
    """
    rows = [COST_CSV_HEADER]
    for config in configs:
        kind, n, d, H, m = _unpack(config)
        rows.append(count_cost(kind, n, d, H, m=m).csv_row())
    return "\n".join(rows) + "\n"


_BINOPS = {ast.Add: operator.add, ast.Mult: operator.mul, ast.Pow: operator.pow}


def eval_formula(expr: str, **names) -> int:
    """Evaluate an integer polynomial in ``n``, ``d``, ``m``."""

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.Name) and node.id in names:
            return int(names[node.id])
        raise ValueError(f"unsupported expression element in {expr!r}")

    return walk(ast.parse(expr, mode="eval"))


def reference_table(configs) -> str:
    """The table's closed forms, evaluated symbolically per configuration."""
    rows = [REFERENCE_CSV_HEADER]
    for config in configs:
        kind, n, d, _H, m = _unpack(config)
        flops_f, params_f = TABLE1_FORMULAS[kind.variant]
        rows.append(",".join(str(v) for v in (
            kind.variant, flops_f, params_f, n, d, m,
            eval_formula(flops_f, n=n, d=d, m=m), eval_formula(params_f, n=n, d=d, m=m),
        )))
    return "\n".join(rows) + "\n"


def cost_configs(ns, ds, Hs, ms, variants=("qkv", "kv", "kvpos")) -> list:
    out = []
    for variant in variants:
        for n in ns:
            for d in ds:
                for H in Hs:
                    if d % H:
                        continue
                    if variant != "kvpos":
                        out.append((AttentionKind(variant), n, d, H, 0))
                        continue
                    for m in ms:
                        out.append((AttentionKind.kvpos(max(m, 1)), n, d, H, m))
    return out
