"""Line-oriented text format for detections with trajectories.

::

    pedcast-predictions 1
    t_future 0.5 1.0 1.5 2.0 2.5 3.0
    scene 0 2
    det 3.1 -4.0 0.7 0.9 1.57 0.93
    fut 3.1 -3.3 1.57 3.1 -2.6 1.57 ...
    hist 3.1 -4.0 1.57 3.1 -4.5 1.57 ...
    det ...

Each ``scene <index> <count>`` header is followed by ``count`` records.
A record is a ``det x y w l h score`` line, a ``fut`` line with one
``x y h`` triple per future offset, and an optional ``hist`` line of
``x y h`` triples at offsets 0, -1, .... Floats are written with ``repr``
so files round-trip exactly. Blank lines and ``#`` comments are skipped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HEADER = "pedcast-predictions 1"


class PredictionFormatError(ValueError):
    pass


@dataclass
class PredictedObject:
    box: np.ndarray          # (5,)
    score: float
    future: np.ndarray       # (n_future, 3)
    history: np.ndarray | None = None   # (t, 3)


@dataclass
class PredictionFile:
    t_future: tuple
    scenes: dict = field(default_factory=dict)   # scene index -> list[PredictedObject]


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def dumps_predictions(pf: PredictionFile) -> str:
    lines = [HEADER, "t_future " + _fmt(pf.t_future)]
    for idx in sorted(pf.scenes):
        objs = pf.scenes[idx]
        lines.append(f"scene {idx} {len(objs)}")
        for o in objs:
            lines.append("det " + _fmt(np.append(o.box, o.score)))
            lines.append("fut " + _fmt(o.future))
            if o.history is not None:
                lines.append("hist " + _fmt(o.history))
    return "\n".join(lines) + "\n"


def loads_predictions(text: str) -> PredictionFile:
    rows = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line and not line.startswith("#"):
            rows.append((n, line.split()))
    if not rows or " ".join(rows[0][1]) != HEADER:
        raise PredictionFormatError(f"missing header line {HEADER!r}")
    pos = 1

    def floats(n, toks):
        try:
            return np.array([float(t) for t in toks])
        except ValueError:
            raise PredictionFormatError(f"line {n}: expected numbers, got {' '.join(toks)!r}") from None

    if pos >= len(rows) or rows[pos][1][0] != "t_future":
        raise PredictionFormatError("second line must be 't_future ...'")
    t_future = tuple(floats(rows[pos][0], rows[pos][1][1:]))
    nf = len(t_future)
    pos += 1
    pf = PredictionFile(t_future)
    while pos < len(rows):
        n, toks = rows[pos]
        if toks[0] != "scene" or len(toks) != 3:
            raise PredictionFormatError(f"line {n}: expected 'scene <index> <count>'")
        idx, count = int(toks[1]), int(toks[2])
        if idx in pf.scenes:
            raise PredictionFormatError(f"line {n}: scene {idx} listed twice")
        pos += 1
        objs = []
        for _ in range(count):
            if pos >= len(rows):
                raise PredictionFormatError(f"scene {idx}: file ends inside its records")
            n, toks = rows[pos]
            if toks[0] != "det" or len(toks) != 7:
                raise PredictionFormatError(f"line {n}: expected 'det x y w l h score'")
            det = floats(n, toks[1:])
            pos += 1
            if pos >= len(rows) or rows[pos][1][0] != "fut":
                raise PredictionFormatError(f"line {n}: detection without a 'fut' line")
            n, toks = rows[pos]
            fut = floats(n, toks[1:])
            if len(fut) != 3 * nf:
                raise PredictionFormatError(f"line {n}: expected {3 * nf} future values, got {len(fut)}")
            pos += 1
            hist = None
            if pos < len(rows) and rows[pos][1][0] == "hist":
                n, toks = rows[pos]
                hist = floats(n, toks[1:])
                if len(hist) % 3:
                    raise PredictionFormatError(f"line {n}: history values must come in x y h triples")
                hist = hist.reshape(-1, 3)
                pos += 1
            if not 0.0 <= det[5] <= 1.0:
                raise PredictionFormatError(f"scene {idx}: score {det[5]} outside [0, 1]")
            objs.append(PredictedObject(det[:5], float(det[5]), fut.reshape(nf, 3), hist))
        pf.scenes[idx] = objs
    return pf


def write_predictions(path, pf: PredictionFile) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_predictions(pf))


def read_predictions(path) -> PredictionFile:
    with open(path) as fh:
        return loads_predictions(fh.read())
