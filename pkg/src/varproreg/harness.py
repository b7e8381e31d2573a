"""Experiment runner and command-line interface.

Each experiment reads an INI file (``key = value`` under ``[sections]``),
writes CSV tables to the output directory and, where useful, an SVG plot
built from exactly the numbers in a CSV twin.

CSV schemas (version 1):

* ``timing.csv``: target, base, mean_ms, std_ms, factor
* ``singlescale.csv``: run, method, identity_ssd, final_ssd, iterations
* ``hessian_compare.csv``: one row per scale transition and mode (see
  :data:`varproreg.multiscale.RECORD_COLUMNS`)
* ``superres_trace.csv``: seed, policy, cg_iters, iter, loss, rel_loss,
  rel_grad, recon_error, accepted, damping
* ``superres_summary.csv``: seed, policy, cg_iters, rel_loss, rel_grad,
  recon_error, status, accepted_steps
* ``taylor.csv``: h, then one error column per policy;
  ``taylor_slopes.csv``: policy, slope
"""

import argparse
import configparser
import csv
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import multiscale as ms
from . import problems, registration as reg, superres as sr
from .errors import ConfigError, NumericalError
from .imaging import Image, load_pgm, save_pgm
from .optim import LMConfig, ProjectionPolicy, TrustRegionConfig

EXPERIMENTS = ("timing", "singlescale", "hessian-compare", "superres", "jacobian-convergence")
CSV_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    experiment: str
    out: Path
    sections: dict = field(default_factory=dict)

    def get(self, section, key, default=None, cast=str):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {cast.__name__}") from exc

    def get_list(self, section, key, default=(), cast=float):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return list(default)
        try:
            return [cast(v.strip()) for v in raw.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a list of {cast.__name__}") from exc

    def get_bool(self, section, key, default=False):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")


def load_config(path=None, experiment=None, out=".", seed=None, predictor_sign=None, text=None):
    """Parse an INI file (or ``text``) into an :class:`ExperimentConfig`.

    ``seed`` and ``predictor_sign`` override the file, as on the command line.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        if text is not None:
            cp.read_string(text)
        elif path is not None:
            with open(path) as fh:
                cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    sections = {s: dict(cp.items(s)) for s in cp.sections()}
    name = experiment or sections.get("experiment", {}).get("name")
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    if seed is not None:
        sections.setdefault("problem", {})["seed"] = str(seed)
        sections.setdefault("superres", {})["seeds"] = str(seed)
    if predictor_sign is not None:
        if predictor_sign not in ms.SIGNS:
            raise ConfigError(f"predictor sign must be one of {ms.SIGNS}")
        sections.setdefault("continuation", {})["sign"] = predictor_sign
    return ExperimentConfig(name, Path(out), sections)


def _tr_config(cfg):
    s = "trust_region"
    d = TrustRegionConfig()
    return TrustRegionConfig(cfg.get(s, "initial_radius", d.initial_radius, float),
                             cfg.get(s, "max_radius", d.max_radius, float),
                             cfg.get(s, "eta_accept", d.eta_accept, float),
                             cfg.get(s, "grad_tol", d.grad_tol, float),
                             cfg.get(s, "max_iters", d.max_iters, int))


def _lm_config(cfg, grad_tol=None):
    s = "lm"
    d = LMConfig()
    return LMConfig(cfg.get(s, "initial_damping", d.initial_damping, float),
                    cfg.get(s, "damping_up", d.damping_up, float),
                    cfg.get(s, "damping_down", d.damping_down, float),
                    cfg.get(s, "grad_tol", d.grad_tol if grad_tol is None else grad_tol, float),
                    cfg.get(s, "max_iters", d.max_iters, int))


def registration_problem(cfg):
    """Registration pair named by ``[problem]``; returns ``(prob, w_true or None)``."""
    source = cfg.get("problem", "source", "bundled")
    lam = cfg.get("problem", "lam", 0.0, float)
    if source == "pgm":
        t, r = cfg.get("problem", "template"), cfg.get("problem", "reference")
        if not t or not r:
            raise ConfigError("[problem] source = pgm needs template and reference paths")
        return reg.RegistrationProblem(load_pgm(t), load_pgm(r), lam), None
    if source != "bundled":
        raise ConfigError(f"unknown registration problem source {source!r}")
    name = cfg.get("problem", "name", "rotation")
    n = cfg.get("problem", "size", 32, int)
    if name == "rotation":
        prob, w = problems.rotated_pair(n, cfg.get("problem", "angle", 60.0, float), lam=lam)
    elif name == "translation":
        prob, w = problems.gaussian_translation_pair(n)
    elif name == "identical":
        img = problems.registration_phantom(n)
        prob, w = reg.RegistrationProblem(img, img, lam), reg.IDENTITY.copy()
    else:
        raise ConfigError(f"unknown bundled registration problem {name!r}")
    if cfg.get_bool("problem", "swapped"):
        prob = prob.swapped()
    return prob, w


def schedule_from(cfg):
    thetas = cfg.get_list("schedule", "thetas", ms.DEFAULT_THETAS)
    try:
        return ms.ScaleSchedule(tuple(thetas))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# output helpers


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "varproreg"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    _pyplot().close(fig)


def _save_image(img, path):
    """Rescale to [0, 1] for display and write a PGM."""
    d = img.data
    lo, hi = float(d.min()), float(d.max())
    save_pgm(Image(img.grid, (d - lo) / (hi - lo) if hi > lo else d * 0), path)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class TimingReport:
    rows: list  # (target, base, mean_ms, std_ms, factor)

    def factor(self, target):
        return next(r[4] for r in self.rows if r[0] == target)


def _time(fn, warmup, runs):
    for _ in range(warmup):
        fn()
    out = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return 1e3 * out.mean(), 1e3 * out.std()


def cmd_timing(cfg):
    prob, _ = registration_problem(cfg)
    theta = cfg.get("timing", "theta", 0.0, float)
    warmup = cfg.get("timing", "warmup", 10, int)
    runs = cfg.get("timing", "runs", 100, int)
    w = reg.IDENTITY + np.array([0.02, -0.03, 0.01, 0.025, -0.01, -0.02])
    prob.spline(theta)  # fit outside the timed region
    targets = [
        ("loss", "loss", lambda: reg.loss(prob, w, theta)),
        ("gradient", "loss", lambda: reg.grad_loss(prob, w, theta)),
        ("hessian", "loss", lambda: reg.hess_loss(prob, w, theta)),
        ("forward", "forward", lambda: reg.residual(prob, w, theta)),
        ("jacobian", "forward", lambda: ad.jacobian(lambda v: reg.residual(prob, v, theta), w)),
    ]
    stats = {name: _time(fn, warmup, runs) for name, _, fn in targets}
    rows = [(name, base, *stats[name], stats[name][0] / stats[base][0]) for name, base, _ in targets]
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "timing.csv", ["target", "base", "mean_ms", "std_ms", "factor"], rows)
    return TimingReport(rows)


def cmd_singlescale_vs_pc(cfg):
    prob, _ = registration_problem(cfg)
    runs = [("original", prob)]
    if cfg.get_bool("singlescale", "include_swapped", True):
        runs.append(("swapped", prob.swapped()))
    tr_cfg = _tr_config(cfg)
    sched = schedule_from(cfg)
    sign = cfg.get("continuation", "sign", "euler")
    rows, images = [], []
    cfg.out.mkdir(parents=True, exist_ok=True)
    for label, p in runs:
        ssd0 = reg.ssd(p, reg.IDENTITY)
        w_s, tr = ms.run_single_scale(p, cfg=tr_cfg)
        w_pc, recs = ms.run_predictor_corrector(p, sched, "exact", tr_cfg=tr_cfg, sign=sign)
        pc_iters = sum(r.corrector_iters for r in recs)
        rows.append((label, "single_scale", ssd0, reg.ssd(p, w_s), tr.iterations))
        rows.append((label, "predictor_corrector", ssd0, reg.ssd(p, w_pc), pc_iters))
        panel = [p.template, p.reference, reg.warped_template(p, w_pc), reg.warped_template(p, w_s)]
        for name, img in zip(("template", "reference", "pc", "single"), panel):
            _save_image(img, cfg.out / f"{label}_{name}.pgm")
        images.append((label, panel))
    write_csv(cfg.out / "singlescale.csv", ["run", "method", "identity_ssd", "final_ssd", "iterations"], rows)
    plt = _pyplot()
    fig, axes = plt.subplots(len(images), 4, figsize=(8, 2.2 * len(images)), squeeze=False)
    titles = ("template", "reference", "predictor-corrector", "single scale")
    for i, (label, panel) in enumerate(images):
        for j, img in enumerate(panel):
            axes[i, j].imshow(img.data, cmap="gray", origin="lower")
            axes[i, j].set_xticks([])
            axes[i, j].set_yticks([])
            axes[i, j].set_title(f"{label}: {titles[j]}", fontsize=7)
    _save_svg(fig, cfg.out / "singlescale.svg")
    return rows


def cmd_hessian_compare(cfg):
    prob, _ = registration_problem(cfg)
    sched = schedule_from(cfg)
    sign = cfg.get("continuation", "sign", "euler")
    modes = cfg.get_list("continuation", "modes", ms.HESSIAN_MODES, str)
    out = {}
    cfg.out.mkdir(parents=True, exist_ok=True)
    for mode in modes:
        _, recs = ms.run_predictor_corrector(prob, sched, mode, tr_cfg=_tr_config(cfg),
                                             lm_cfg=_lm_config(cfg), sign=sign)
        out[mode] = recs
    header = list(ms.RECORD_COLUMNS)
    rows = [[getattr(r, c) for c in header] for mode in modes for r in out[mode]]
    write_csv(cfg.out / "hessian_compare.csv", header, rows)
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for mode in modes:
        th = [r.theta_from for r in out[mode]]
        axes[0].plot(th, [r.rel_loss_diff for r in out[mode]], "o-", label=mode)
        axes[1].plot(th, [r.rel_grad_diff for r in out[mode]], "o-", label=mode)
    for a, t in zip(axes, ("relative loss difference", "relative gradient norm difference")):
        a.set_xscale("log")
        a.set_xlabel("theta (transition start)")
        a.set_title(t, fontsize=9)
        a.axhline(0.0, color="k", lw=0.5)
        a.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, cfg.out / "hessian_compare.svg")
    return out


def parse_policy(label, cg_iters):
    """``none``, ``full`` or ``last<fraction>`` (e.g. ``last0.9``)."""
    label = label.strip()
    if label == "none":
        return ProjectionPolicy.none(cg_iters)
    if label == "full":
        return ProjectionPolicy.full(cg_iters)
    if label.startswith("last"):
        try:
            frac = float(label[4:])
        except ValueError as exc:
            raise ConfigError(f"bad policy label {label!r}") from exc
        if frac == 1.0:
            return ProjectionPolicy.full(cg_iters)
        return ProjectionPolicy.last_fraction(frac, cg_iters)
    raise ConfigError(f"unknown policy {label!r}")


def superres_grid(cfg):
    """List of ``(seed, label, policy)`` cells requested by ``[superres]``."""
    cg = cfg.get("superres", "cg_iters", 200, int)
    labels = cfg.get_list("superres", "policies", ("none", "full"), str)
    inexact = cfg.get_list("superres", "inexact_cg_iters", (), int)
    seeds = cfg.get_list("superres", "seeds", (0,), int)
    cells = []
    for seed in seeds:
        for lab in labels:
            cells.append((seed, lab, parse_policy(lab, cg)))
        for n in inexact:
            cells.append((seed, "full", ProjectionPolicy.full(n)))
    return cells


@dataclass
class SuperResRun:
    seed: int
    label: str
    policy: ProjectionPolicy
    w: np.ndarray
    f: np.ndarray
    records: list
    status: str
    recon_error: float


def run_superres_cell(seed, label, policy, lam_f=sr.DEFAULT_LAM_F, gn_iters=10, noise_sigma=0.0,
                      lm_cfg=None, w0=None, size=20, templates=3, warm_start=False):
    data, truth = problems.superres_problem(seed, n=size, q=templates, noise_sigma=noise_sigma)
    w, f, trace = sr.varpro_gauss_newton(data, policy, lm_cfg, gn_iters, w0=w0, lam_f=lam_f,
                                         f_true=truth.f_true.intensities, warm_start=warm_start)
    return SuperResRun(seed, label, policy, w, f, trace.records, trace.status, trace.final_recon_error)


def _cell_worker(args):
    return run_superres_cell(*args[0], **args[1])


def cmd_superres(cfg):
    kw = dict(lam_f=cfg.get("superres", "lam_f", sr.DEFAULT_LAM_F, float),
              gn_iters=cfg.get("superres", "gn_iters", 10, int),
              noise_sigma=cfg.get("superres", "noise_sigma", 0.0, float),
              lm_cfg=_lm_config(cfg, grad_tol=1e-14),
              size=cfg.get("problem", "size", 20, int),
              templates=cfg.get("problem", "templates", 3, int),
              warm_start=cfg.get_bool("superres", "warm_start", False))
    cells = superres_grid(cfg)
    workers = cfg.get("superres", "workers", 1, int)
    jobs = [((seed, lab, pol), kw) for seed, lab, pol in cells]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_cell_worker, jobs))
    else:
        results = [_cell_worker(j) for j in jobs]
    cfg.out.mkdir(parents=True, exist_ok=True)
    trace_rows, summary = [], []
    for r in results:
        for rec in r.records:
            trace_rows.append((r.seed, r.label, r.policy.cg_iters, rec["iter"], rec["loss"], rec["rel_loss"],
                               rec["rel_grad"], rec.get("recon_error", ""), rec["accepted"],
                               rec["control_param"]))
        last = sr.final_record(r.records)
        summary.append((r.seed, r.label, r.policy.cg_iters, last["rel_loss"], last["rel_grad"],
                        r.recon_error, r.status, sum(bool(x["accepted"]) for x in r.records[1:])))
        data, truth = problems.superres_problem(r.seed, n=kw["size"], q=kw["templates"])
        stem = f"seed{r.seed}_{r.label}_cg{r.policy.cg_iters}"
        _save_image(Image(data.fine, r.f), cfg.out / f"{stem}_recon.pgm")
        _save_image(Image(data.fine, np.abs(r.f - truth.f_true.intensities)), cfg.out / f"{stem}_error.pgm")
    write_csv(cfg.out / "superres_trace.csv",
              ["seed", "policy", "cg_iters", "iter", "loss", "rel_loss", "rel_grad", "recon_error",
               "accepted", "damping"], trace_rows)
    write_csv(cfg.out / "superres_summary.csv",
              ["seed", "policy", "cg_iters", "rel_loss", "rel_grad", "recon_error", "status",
               "accepted_steps"], summary)
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    first = results[0].seed if results else None
    for r in results:
        if r.seed != first:
            continue
        acc = [x for x in r.records if x["accepted"]]
        name = f"{r.label} ({r.policy.cg_iters} CG)"
        axes[0].semilogy([x["iter"] for x in acc], [x["rel_loss"] for x in acc], ".-", label=name)
        axes[1].semilogy([x["iter"] for x in acc], [x["rel_grad"] for x in acc], ".-", label=name)
    for a, t in zip(axes, ("relative loss", "relative gradient norm")):
        a.set_xlabel("Gauss-Newton iteration")
        a.set_title(t, fontsize=9)
        a.legend(fontsize=6)
    fig.tight_layout()
    _save_svg(fig, cfg.out / "superres.svg")
    return results


def taylor_errors(data, w, v, policy, hs, lam_f=sr.DEFAULT_LAM_F):
    """``||r(w + h v) - r(w) - h J v||`` for each ``h``."""
    obj = sr.VarproObjective(data, policy, lam_f)
    r0, J = obj.residual_and_jacobian(w)
    r0 = np.asarray(ad.primal(r0), dtype=float)
    Jv = J @ v
    return np.array([np.linalg.norm(obj.residual(w + h * v) - r0 - h * Jv) for h in hs])


def fit_slope(hs, errs, h_max=1e-2):
    hs, errs = np.asarray(hs), np.asarray(errs)
    m = (hs <= h_max) & (errs > 0)
    return float(np.polyfit(np.log10(hs[m]), np.log10(errs[m]), 1)[0])


def taylor_setup(seed=0, direction_seed=1, offset=0.3):
    """Bundled problem, a point part-way to the truth and a unit direction."""
    data, truth = problems.superres_problem(seed)
    w0 = data.identity_params()
    w = w0 + offset * (truth.w_true - w0)
    v = np.random.default_rng(direction_seed).standard_normal(w.size)
    return data, w, v / np.linalg.norm(v)


def cmd_jacobian_convergence(cfg):
    s = "taylor"
    data, w, v = taylor_setup(cfg.get("problem", "seed", 0, int), cfg.get(s, "direction_seed", 1, int),
                              cfg.get(s, "offset", 0.3, float))
    cg = cfg.get(s, "cg_iters", 200, int)
    lam_f = cfg.get(s, "lam_f", cfg.get("superres", "lam_f", sr.DEFAULT_LAM_F, float), float)
    labels = cfg.get_list(s, "policies", ("none", "last0.7", "last0.9", "last0.95", "full"), str)
    hs = 10.0 ** -np.arange(cfg.get(s, "min_exponent", 0.5, float), cfg.get(s, "max_exponent", 6.0, float) + 1e-9,
                            cfg.get(s, "exponent_step", 0.5, float))
    h_max = cfg.get(s, "fit_h_max", 1e-2, float)
    curves = {lab: taylor_errors(data, w, v, parse_policy(lab, cg), hs, lam_f) for lab in labels}
    slopes = {lab: fit_slope(hs, e, h_max) for lab, e in curves.items()}
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "taylor.csv", ["h"] + labels, [[h] + [curves[l][i] for l in labels] for i, h in enumerate(hs)])
    write_csv(cfg.out / "taylor_slopes.csv", ["policy", "slope"], [(l, slopes[l]) for l in labels])
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for lab in labels:
        ax.loglog(hs, curves[lab], "o-", ms=3, label=f"{lab} (slope {slopes[lab]:.2f})")
    ax.set_xlabel("h")
    ax.set_ylabel("||r(w+hv) - r(w) - h J v||")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, cfg.out / "taylor.svg")
    return hs, curves, slopes


COMMANDS = {
    "timing": cmd_timing,
    "singlescale": cmd_singlescale_vs_pc,
    "hessian-compare": cmd_hessian_compare,
    "superres": cmd_superres,
    "jacobian-convergence": cmd_jacobian_convergence,
}


def run(cfg):
    return COMMANDS[cfg.experiment](cfg)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="varproreg", description=__doc__.split("\n")[0])
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="INI file; defaults apply when omitted")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--predictor-sign", choices=ms.SIGNS)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.experiment, args.out, args.seed, args.predictor_sign)
        run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    print(f"{args.experiment}: outputs written to {args.out}")
    return 0


def main_entry():
    sys.exit(main())
