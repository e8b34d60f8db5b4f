"""Writes ``VAR i i`` for every CBF variable; used to test variable ordering."""

from __future__ import annotations

import sys
from pathlib import Path

from ..conic import read_cbf
from ._common import write_solution


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: python3 -m cvxc.adapters.echo INPUT OUTPUT", file=sys.stderr)
        return 1
    doc = read_cbf(Path(argv[0]).read_text(encoding="utf-8"))
    write_solution(argv[1], "ECHO", range(doc.nvars))
    return 0


if __name__ == "__main__":
    sys.exit(main())
