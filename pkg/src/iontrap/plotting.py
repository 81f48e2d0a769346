"""SVG figures for CLI reports (matplotlib, deterministic output)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"svg.hashsalt": "iontrap", "svg.fonttype": "none", "font.size": 9})


def _save(fig, path, meta: dict | None = None) -> None:
    info = {"Date": None, "Creator": "iontrap"}
    if meta:
        info["Description"] = " ".join(f"{k}={v}" for k, v in meta.items())
    fig.savefig(path, format="svg", metadata=info)
    plt.close(fig)


def potential_map(x, z, values, path, minima=None, meta=None, title="pseudopotential (meV)"):
    """Filled contour of a potential slice; ``x``, ``z`` in metres, ``values`` (len(z), len(x))."""
    fig, ax = plt.subplots(figsize=(7, 3))
    cs = ax.contourf(np.asarray(x) * 1e6, np.asarray(z) * 1e6, values, levels=30, cmap="viridis")
    fig.colorbar(cs, ax=ax, label=title)
    if minima is not None and len(minima):
        m = np.asarray(minima)
        ax.plot(m[:, 0] * 1e6, m[:, 2] * 1e6, "r+", ms=6)
    ax.set_xlabel("x (um)")
    ax.set_ylabel("z (um)")
    fig.tight_layout()
    _save(fig, path, meta)


def interaction_heatmap(matrix, freq_offsets_hz, path, meta=None, title="interaction matrix"):
    """Ions on x, modes on y, diverging colours; right axis lists each mode's offset from the top mode."""
    m = np.asarray(matrix)
    n_ion, n_mode = m.shape
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(m.T, cmap="RdBu_r", vmin=-1, vmax=1, origin="lower", aspect="auto")
    ax.set_xticks(range(n_ion), [str(i + 1) for i in range(n_ion)])
    ax.set_yticks(range(n_mode), [str(k + 1) for k in range(n_mode)])
    ax.set_xlabel("ion")
    ax.set_ylabel("mode")
    right = ax.twinx()
    right.set_ylim(ax.get_ylim())
    right.set_yticks(range(n_mode), [f"{f:.0f}" for f in freq_offsets_hz])
    right.set_ylabel("offset (Hz)")
    fig.colorbar(im, ax=right, pad=0.15)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path, meta)


def rabi_heatmap(mu_hz, omega_s_hz, path, meta=None):
    """Rabi frequency per interval (columns) for each detuning (rows)."""
    o = np.atleast_2d(np.asarray(omega_s_hz)) / 1e6
    mu = np.atleast_1d(np.asarray(mu_hz)) / 1e6
    fig, ax = plt.subplots(figsize=(5, 3.5))
    lim = np.nanmax(np.abs(o)) if np.any(np.isfinite(o)) else 1.0
    extent = [0.5, o.shape[1] + 0.5, mu[0], mu[-1] if len(mu) > 1 else mu[0] + 1e-6]
    im = ax.imshow(o, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto", origin="lower", extent=extent)
    fig.colorbar(im, ax=ax, label="Rabi frequency (MHz)")
    ax.set_xlabel("interval")
    ax.set_ylabel("detuning (MHz)")
    fig.tight_layout()
    _save(fig, path, meta)


def infidelity_curve(mu_hz, infidelity, path, meta=None, label=None):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    y = np.asarray(infidelity, dtype=float)
    ax.semilogy(np.asarray(mu_hz) / 1e6, np.where(y > 0, y, np.nan), lw=0.8, label=label)
    ax.set_xlabel("detuning (MHz)")
    ax.set_ylabel("infidelity")
    if label:
        ax.legend()
    fig.tight_layout()
    _save(fig, path, meta)


def trajectory_plot(times, positions, path, meta=None):
    """x and z of every ion against time."""
    t = np.asarray(times) * 1e6
    p = np.asarray(positions) * 1e6
    fig, axes = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
    for i in range(p.shape[1]):
        axes[0].plot(t, p[:, i, 0] - p[0, i, 0], lw=0.6)
        axes[1].plot(t, p[:, i, 2], lw=0.6)
    axes[0].set_ylabel("x - x0 (um)")
    axes[1].set_ylabel("z (um)")
    axes[1].set_xlabel("t (us)")
    fig.tight_layout()
    _save(fig, path, meta)


def loss_curve(history, path, meta=None):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogy(np.maximum(np.asarray(history, dtype=float), 1e-300))
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss (rad/s)^2")
    fig.tight_layout()
    _save(fig, path, meta)
