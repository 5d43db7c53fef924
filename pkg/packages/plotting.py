"""Figures of a run: the profile with its modification, the residual trace and the final field."""
import logging

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from packages.diffusion_profile import branch_inverses
from packages.rank_one_geometry import SolutionType
from packages.verification import target_band

logger = logging.getLogger(__name__)


def profile_frame(profile, mod_profile=None, points=600):
    """Long table (s, value, curve) of sigma and, when given, the modified profile."""
    s = np.linspace(0.0, 1.25 * profile.s_plus, points)
    frames = [pd.DataFrame({"s": s, "value": profile.sigma(s), "curve": "sigma"})]
    if mod_profile is not None:
        frames.append(pd.DataFrame({"s": s, "value": mod_profile.sigma_tilde(s), "curve": "modified"}))
    return pd.concat(frames, ignore_index=True)


def plot_profile(profile, output_file, mod_profile=None, r_tilde=None, solution_type=SolutionType.TYPE_I):
    """
    Plot sigma (and the modified profile) with the landmarks s_-, s_0, s_+.

    Parameters:
    profile (Profile): Diffusion profile.
    output_file (str): JPG path.
    mod_profile (ModifiedProfile): Optional monotone surrogate.
    r_tilde (float): When given, the band set of the solution type is shaded.
    """
    fig, ax = plt.subplots(figsize=(10, 6))
    sns.lineplot(data=profile_frame(profile, mod_profile), x="s", y="value", hue="curve", ax=ax)
    for name, value in (("s_-", profile.s_minus), ("s_0", profile.s_zero), ("s_+", profile.s_plus)):
        ax.axvline(value, color="grey", linestyle=":", linewidth=1)
        ax.annotate(name, (value, ax.get_ylim()[1]), ha="center", va="bottom")
    if r_tilde is not None:
        ax.axhline(r_tilde, color="black", linestyle="--", linewidth=1)
        ax.axhline(-r_tilde, color="black", linestyle="--", linewidth=1)
        band = target_band(profile, r_tilde, solution_type)
        for lo, hi in band.intervals:
            ax.axvspan(lo, hi, color="tab:green", alpha=0.15)
        inverses = branch_inverses(profile, r_tilde)
        ax.set_title(f"{profile.name}: r~ = {r_tilde:.4g}, s_+(r~) = {inverses.s_plus_r:.4g}")
    else:
        ax.set_title(profile.name)
    ax.set_xlabel("s")
    ax.set_ylabel("sigma(s)")
    plt.tight_layout()
    plt.savefig(output_file)
    plt.close()
    return output_file


def plot_residual_trace(trace, thresholds, output_file):
    """
    Flux residual of the initial state and after each pass, against the pass
    budgets eps_j |Omega_T| (one per pass, drawn from pass 1 on).
    """
    passes = list(range(len(trace)))
    data = pd.concat([
        pd.DataFrame({"pass": passes, "value": list(trace), "series": "flux residual"}),
        pd.DataFrame({"pass": passes[1:len(thresholds) + 1], "value": list(thresholds)[:len(trace) - 1],
                      "series": "budget"}),
    ], ignore_index=True)
    fig, ax = plt.subplots(figsize=(8, 5))
    sns.lineplot(data=data, x="pass", y="value", hue="series", marker="o", ax=ax)
    ax.set_yscale("log")
    ax.set_xlabel("pass (0 = initial state)")
    ax.set_ylabel("integral of |v_t - A(Du)|")
    ax.set_title("Residual trace")
    plt.tight_layout()
    plt.savefig(output_file)
    plt.close()
    return output_file


def plot_field(state, output_file):
    """Heat map of u over (x, t) in 1D, or of the last slice in 2D."""
    grid = state.grid
    fig, ax = plt.subplots(figsize=(10, 8))
    if grid.dimension == 1:
        (x0, x1), = grid.extent
        image = ax.imshow(state.u, origin="lower", aspect="auto", cmap="viridis",
                          extent=(x0, x1, 0.0, grid.horizon), interpolation="nearest")
        ax.set_xlabel("x")
        ax.set_ylabel("t")
        ax.set_title("u(x, t)")
    else:
        (x0, x1), (y0, y1) = grid.extent
        image = ax.imshow(state.u[-1].T, origin="lower", cmap="viridis", extent=(x0, x1, y0, y1),
                          interpolation="nearest")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_title(f"u(x, y, T), T = {grid.horizon:.4g}")
    plt.colorbar(image, ax=ax)
    if state.patch_log:
        accepted = sum(entry["accepted"] for entry in state.patch_log)
        ax.text(0.01, 0.99, f"{accepted} laminated boxes", transform=ax.transAxes, va="top", color="white")
    plt.tight_layout()
    plt.savefig(output_file)
    plt.close()
    return output_file
