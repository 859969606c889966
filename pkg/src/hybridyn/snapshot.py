"""Text snapshots of hybrid states.

Layout (one token group per line, ``#`` starts a comment)::

    hybridyn-snapshot 1
    dim <N>
    representation <grid|points>
    hbar <value>
    t <value>
    grid <q_min> <q_max> <n_q> <p_min> <p_max> <n_p>     (or: grid none)
    records <count>
    ...

Points records: ``i j q_ket p_ket q_bra p_bra re im``, one atom per line.
Grid records: ``block i j`` followed by ``n_q`` lines, line ``k_q`` holding
``re im`` pairs for ``k_p = 0 .. n_p-1``; blocks in row-major (i, j) order.
For a points snapshot the grid line, when present, gives the bins used for
assembly.  Floats are written with 17 significant digits, which round-trips
binary64 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .hybrid import HybridState, points_from_records
from .phase_space import PhaseSpaceGrid

MAGIC = "hybridyn-snapshot 1"


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass(frozen=True, eq=False)
class Snapshot:
    state: HybridState
    hbar: float = 1.0
    bins: PhaseSpaceGrid | None = None


def _grid_line(g: PhaseSpaceGrid | None) -> str:
    if g is None:
        return "grid none"
    return "grid " + " ".join([fmt(g.q_min), fmt(g.q_max), str(g.n_q), fmt(g.p_min), fmt(g.p_max), str(g.n_p)])


def dumps(s: HybridState, hbar: float = 1.0, bins: PhaseSpaceGrid | None = None) -> str:
    grid = s.grid if s.representation == "grid" else bins
    lines = [MAGIC, f"dim {s.dim}", f"representation {s.representation}", f"hbar {fmt(hbar)}",
             f"t {fmt(s.t)}", _grid_line(grid)]
    if s.representation == "points":
        recs = list(s.records())
        lines.append(f"records {len(recs)}")
        for i, j, qk, pk, qb, pb, w in recs:
            lines.append(" ".join([str(i), str(j)] + [fmt(x) for x in (qk, pk, qb, pb, w.real, w.imag)]))
    else:
        lines.append(f"records {s.dim * s.dim}")
        for i in range(s.dim):
            for j in range(s.dim):
                lines.append(f"block {i} {j}")
                for row in s.blocks[i, j]:
                    lines.append(" ".join(f"{fmt(z.real)} {fmt(z.imag)}" for z in row))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Snapshot:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != MAGIC:
        raise ConfigError("not a hybridyn snapshot", guard="snapshot")
    try:
        head = {}
        for ln in lines[1:7]:
            key, _, rest = ln.partition(" ")
            head[key] = rest
        dim = int(head["dim"])
        rep = head["representation"]
        hbar = float(head["hbar"])
        t = float(head["t"])
        grid = None
        if head["grid"] != "none":
            g = head["grid"].split()
            grid = PhaseSpaceGrid(float(g[0]), float(g[1]), int(g[2]), float(g[3]), float(g[4]), int(g[5]))
        body = lines[7:]
        if rep == "points":
            recs = []
            for ln in body:
                f = ln.split()
                recs.append((int(f[0]), int(f[1]), float(f[2]), float(f[3]), float(f[4]), float(f[5]),
                             complex(float(f[6]), float(f[7]))))
            return Snapshot(points_from_records(dim, recs, t), hbar, grid)
        if rep != "grid" or grid is None:
            raise ValueError(f"bad representation {rep!r}")
        blocks = np.empty((dim, dim) + grid.shape, dtype=complex)
        pos = 0
        for _ in range(dim * dim):
            _, i, j = body[pos].split()
            pos += 1
            for kq in range(grid.n_q):
                vals = np.array(body[pos].split(), dtype=float)
                blocks[int(i), int(j), kq] = vals[0::2] + 1j * vals[1::2]
                pos += 1
        return Snapshot(HybridState.from_grid(blocks, grid, t), hbar, grid)
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"malformed snapshot: {exc}", guard="snapshot") from exc


def write(path, s: HybridState, hbar: float = 1.0, bins: PhaseSpaceGrid | None = None) -> None:
    Path(path).write_text(dumps(s, hbar, bins))


def read(path) -> Snapshot:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read snapshot: {exc}", guard="snapshot") from exc
    return loads(text)
