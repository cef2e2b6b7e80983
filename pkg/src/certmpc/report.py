"""Static figures and markdown tables for a completed run directory."""
from __future__ import annotations

import csv
import io

import numpy as np


def render_fig1(trajectories: dict, spec, path) -> None:
    """Three stacked panels (angle, velocity, input) overlaying each controller."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "certmpc", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(3, 1, figsize=(6.0, 7.0), sharex=True)
        styles = {"mpc": ("MPC", "-", "k"), "nn-nominal": ("NN nominal", "--", "tab:red"),
                  "nn-sensreg": ("NN sens.-regularized", "-.", "tab:blue")}
        for name, traj in trajectories.items():
            label, ls, color = styles.get(name, (name, ":", None))
            axes[0].plot(traj.t, traj.x[:, 0], ls, color=color, label=label)
            axes[1].plot(traj.t, traj.x[:, 1], ls, color=color, label=label)
            axes[2].step(traj.t[:-1], traj.u_applied[:, 0], ls, where="post", color=color,
                         label=label)
        for j in range(2):
            for b in (spec.state_lower[j], spec.state_upper[j]):
                axes[j].axhline(b, color="0.5", lw=0.8, ls=":")
        for b in (spec.input_lower[0], spec.input_upper[0]):
            axes[2].axhline(b, color="0.5", lw=0.8, ls=":")
        axes[1].set_ylim(spec.state_lower[1] - 0.5, spec.state_upper[1] + 0.5)
        axes[0].set_ylabel("x1 (rad)")
        axes[1].set_ylabel("x2 (rad/s)")
        axes[2].set_ylabel("u (N·m)")
        axes[2].set_xlabel("time (s)")
        axes[0].legend(loc="best", fontsize="small")
        for ax in axes:
            ax.grid(True, lw=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def write_fig2_data(series: dict, path) -> None:
    """Long-format CSV: ``panel, variant, index, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["panel", "variant", "index", "value"])
        for (panel, variant), values in series.items():
            for i, v in enumerate(values):
                w.writerow([panel, variant, i, repr(float(v))])


def _fmt(v, digits=4):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "n/a"
    return f"{v:.{digits}f}"


def _table(header, rows) -> str:
    out = io.StringIO()
    out.write("| " + " | ".join(header) + " |\n")
    out.write("|" + "|".join("---" for _ in header) + "|\n")
    for r in rows:
        out.write("| " + " | ".join(r) + " |\n")
    return out.getvalue()


def box_stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {k: float("nan") for k in ("min", "q1", "median", "q3", "max")}
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


def render_tables(train_rows: dict, sim_rows: dict, series: dict, cert_rows: dict) -> str:
    parts = ["# Run summary\n\n"]
    parts.append("## Post-training statistics\n\n")
    parts.append(_table(
        ["Network", "Validation R²", "ε_D", "L_NN (norm product)", "L_NN (sampled lower)"],
        [[name, _fmt(r["r2"]), _fmt(r["epsilon_d"]), _fmt(r["l_upper"], 2), _fmt(r["l_lower"], 2)]
         for name, r in train_rows.items()]))
    parts.append("\n## Closed-loop statistics\n\n")
    parts.append(_table(
        ["Controller", "Constraint violations (%)", "Max. violation", "Max. input divergence",
         "Terminal ‖x‖"],
        [[name, _fmt(m["violation_pct"], 3), _fmt(m["max_violation"]),
          _fmt(m["max_input_divergence"]), _fmt(m["terminal_norm"])]
         for name, m in sim_rows.items()]))
    if cert_rows:
        parts.append("\n## Certification\n\n")
        parts.append(_table(
            ["Network", "ε", "ε_D", "L_MPC (est.)", "L_NN", "δ required", "δ actual", "Certified"],
            [[name, _fmt(c["epsilon"], 3), _fmt(c["epsilon_d"]), _fmt(c["l_mpc"]["upper"], 2),
              _fmt(c["l_nn"]["upper"], 2), _fmt(c["delta_required"], 6),
              _fmt(c["delta_actual"]), "yes" if c["certified"] else "no"]
             for name, c in cert_rows.items()]))
    parts.append("\n## Distribution summaries\n\n")
    rows = []
    for (panel, variant), values in series.items():
        s = box_stats(values)
        rows.append([panel, variant] + [_fmt(s[k]) for k in ("min", "q1", "median", "q3", "max")])
    parts.append(_table(["Panel", "Network", "min", "q1", "median", "q3", "max"], rows))
    return "".join(parts)
