"""Plain-text architecture configs.

One layer per line, ``#`` starts a comment::

    input 1 28 28          # C H W
    conv 32 3 pad=1        # out_channels kernel [stride=S] [pad=P]
    sbnq relu              # unsigned, ReLU fused; bare "sbnq" is signed
    maxpool 2              # window [stride=S], stride defaults to window
    flatten
    linear 10              # out_features

The last conv/linear is the classifier head and is not followed by SBNQ.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .model import Conv2D, Flatten, GraphError, Linear, MaxPool, ModelGraph, SimSBNQ
from .qat import init_weights

PRESETS = ("mnist_cnn", "toy_mlp")


class ArchError(ValueError):
    pass


def _kv(tokens: list[str]) -> tuple[list[str], dict[str, int]]:
    pos, kw = [], {}
    for t in tokens:
        if "=" in t:
            k, v = t.split("=", 1)
            kw[k] = int(v)
        else:
            pos.append(t)
    return pos, kw


def parse_arch(text: str, weight_bits: int = 4, act_bits: int = 4, seed: int = 0,
               momentum: float = 0.1, name: str = "") -> ModelGraph:
    """Build a freshly initialized sim graph from config text."""
    rng = np.random.default_rng(seed)
    input_shape = None
    shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, *rest = line.split()
        try:
            pos, kw = _kv(rest)
            if op == "input":
                if input_shape is not None:
                    raise ArchError("duplicate input line")
                input_shape = shape = tuple(int(v) for v in pos)
                continue
            if shape is None:
                raise ArchError("config must start with an input line")
            if op == "conv":
                out, k = int(pos[0]), int(pos[1])
                s, p = kw.pop("stride", 1), kw.pop("pad", 0)
                w = init_weights((out, shape[0], k, k), weight_bits, int(rng.integers(2**31)))
                layers.append(Conv2D(w, (s, s), (p, p)))
                shape = (out, (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1)
            elif op == "linear":
                out = int(pos[0])
                if len(shape) != 1:
                    raise ArchError("linear needs a flat input; add a flatten line")
                layers.append(Linear(init_weights((out, shape[0]), weight_bits, int(rng.integers(2**31)))))
                shape = (out,)
            elif op == "sbnq":
                relu = pos == ["relu"]
                if pos not in ([], ["relu"]):
                    raise ArchError(f"unknown sbnq option {pos}")
                layers.append(SimSBNQ.fresh(shape[0], act_bits, signed=not relu, momentum=momentum))
            elif op == "maxpool":
                k = int(pos[0])
                s = kw.pop("stride", k)
                layers.append(MaxPool((k, k), (s, s)))
                shape = (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
            elif op == "flatten":
                layers.append(Flatten())
                shape = (int(np.prod(shape)),)
            else:
                raise ArchError(f"unknown layer {op!r}")
            if kw:
                raise ArchError(f"unknown option(s) {sorted(kw)}")
        except (IndexError, ValueError) as exc:
            raise ArchError(f"line {lineno}: {raw.strip()!r}: {exc}") from exc
    if input_shape is None:
        raise ArchError("config has no input line")
    try:
        return ModelGraph(layers, "sim", weight_bits, act_bits, input_shape, name)
    except GraphError as exc:
        raise ArchError(str(exc)) from exc


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ArchError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("sbnq").joinpath("archs", f"{name}.arch").read_text()


def load_arch(spec: str, **kwargs) -> ModelGraph:
    """``spec`` is a preset name or a path to a config file."""
    if spec in PRESETS:
        return parse_arch(preset_text(spec), name=spec, **kwargs)
    path = Path(spec)
    if not path.is_file():
        raise ArchError(f"{spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return parse_arch(path.read_text(), name=path.stem, **kwargs)
