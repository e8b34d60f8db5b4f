from __future__ import annotations

import json
from pathlib import Path


def sidecar_path(cbf_path) -> Path:
    p = Path(cbf_path)
    return p.with_name(p.stem + ".reduction.json")


def load_sidecar(cbf_path) -> dict:
    path = sidecar_path(cbf_path)
    if not path.exists():
        raise SystemExit(f"missing sidecar {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_solution(path, status: str, values=None) -> None:
    lines = [f"STATUS {status}"]
    for i, v in enumerate(values or ()):
        lines.append(f"VAR {i} {float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

