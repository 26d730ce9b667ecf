"""Diagnostics assembly and CSV output.

The diagnostics file is a single flat CSV with columns
``section,metric,value``; numeric values are printed with ``%.17g`` so
repeated runs are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conservation as cons
from . import mirror as mir
from . import paramcheck as pc
from .flow import Trajectory


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.17g}"
    return str(v)


def write_rows_csv(path, header, rows) -> None:
    """Write rows of mixed int/float cells as UTF-8 CSV with %.17g floats."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    """Ordered (section, metric, value) triples."""

    rows: tuple

    def value(self, section: str, metric: str):
        for s, m, v in self.rows:
            if s == section and m == metric:
                return v
        raise KeyError(f"{section}/{metric}")

    def write(self, path) -> None:
        write_rows_csv(path, ["section", "metric", "value"], self.rows)


def build_diagnostics(traj: Trajectory, idx=None, entropy=None,
                      rate=None) -> DiagnosticsReport:
    """Collect trajectory-level health checks into one report.

    Always includes the conservation defects, manifold membership and the
    general mirror residual; the sign census and reconstruction error need
    the minimal-layer index, the closed-form residual a matching entropy,
    and the rate section a ``RateCheck``.
    """
    rows: list[tuple[str, str, object]] = []
    defect = cons.conservation_defect(traj)
    rows.append(("conservation", "max_defect", float(defect.max())))
    L = traj.num_layers
    for j in range(L):
        for k in range(j + 1, L):
            rows.append(("conservation", f"defect_{j + 1}_{k + 1}", float(defect[j, k])))
    if idx is not None:
        census = cons.sign_census(traj, idx)
        rows.append(("sign_census", "violations", len(census.violations)))
        rows.append(("sign_census", "flagged_nodes", int(census.flagged.sum())))
        if idx.holds:
            rows.append(("reconstruction", "max_error",
                         cons.reconstruction_error(traj, idx)))
    if len(traj) >= 3:
        rows.append(("mirror", "general_residual", mir.mirror_residual_general(traj)))
    if entropy is not None:
        rows.append(("mirror", "closed_form_residual",
                     mir.mirror_residual_closed_form(traj, entropy)))
    rows.append(("manifold", "all_snapshots_on_manifold",
                 int(pc.trajectory_on_manifold(traj))))
    if rate is not None:
        rows.append(("rate", "sigma", rate.sigma))
        rows.append(("rate", "mu", rate.mu))
        rows.append(("rate", "violations", rate.violations))
    return DiagnosticsReport(rows=tuple(rows))
