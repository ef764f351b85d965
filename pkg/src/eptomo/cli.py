"""Command-line front end.

Commands::

    simulate     truth -> count tables (and optionally event files)
    pipeline     event files -> coincidence histograms, fringe fits, fringe count table
    scan-mle     scan count table -> two photon states and a Bloch report
    reconstruct  count tables -> posterior samples and chain traces
    analyze      posterior samples -> entanglement report and histogram tables
    diagnose     chain traces and samples -> R-hat evolution, autocorrelation, acceptance

Every output file starts with ``# config: {...}`` and ``# config_hash: <sha256>``
lines. Input files carrying these lines are checked on read. Outputs hold no
timestamps, so a rerun with the same config and seed is byte-identical.
"""

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from eptomo import bayes, diagnostics, entangle, events, mle, polopt, simkit
from eptomo.exceptions import DataError, EptomoError, NumericalError
from eptomo.qmat import format_density_matrix

logger = logging.getLogger("eptomo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("simulate", "pipeline", "scan-mle", "reconstruct", "analyze", "diagnose")


class UsageError(EptomoError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- provenance headers ---------------------------------------------------------------


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def header(config):
    return f"# config: {canonical_json(config)}\n# config_hash: {config_hash(config)}\n"


def read_header(path):
    """Embedded config of a file written by this tool, or ``None`` if it has none.

    A header whose hash does not match its config is an error.
    """
    cfg_line = hash_line = None
    with open(path) as fh:
        for _ in range(4):
            line = fh.readline()
            if line.startswith("# config: "):
                cfg_line = line[len("# config: ") :].strip()
            elif line.startswith("# config_hash: "):
                hash_line = line[len("# config_hash: ") :].strip()
    if cfg_line is None and hash_line is None:
        return None
    if cfg_line is None or hash_line is None:
        raise DataError(f"{path}: incomplete provenance header")
    try:
        cfg = json.loads(cfg_line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: unreadable embedded config: {exc}") from exc
    if config_hash(cfg) != hash_line:
        raise DataError(f"{path}: config hash mismatch (embedded {hash_line[:12]}..., recomputed {config_hash(cfg)[:12]}...)")
    return cfg


def _write(path, text, config):
    with open(path, "w") as fh:
        fh.write(header(config))
        fh.write(text)


def _table(columns, rows):
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(v) for v in r))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


# -- config handling --------------------------------------------------------------------

DEFAULTS = {
    "truth": {"paper_like": {"target_fidelity": 0.543, "gamma_in": 0.727}},
    "simulate": {"K": 16, "settings": [[s.qwp_deg, s.hwp_deg] for s in polopt.PAPER_SETTINGS], "scan": True, "events": False, "duration_s": None},
    "pipeline": {"events": None, "bin_width_ps": events.DEFAULT_BIN_WIDTH_PS, "range_ps": events.DEFAULT_RANGE_PS, "K": 16, "detector_px": 256, "windows": None},
    "scan-mle": {"counts": None},
    "reconstruct": {"counts": None, "chain": {}},
    "analyze": {"samples": None, "gamma": None, "bins": 50},
    "diagnose": {"trace": None, "samples": None, "max_lag": 200, "n_points": 50},
}


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - set(DEFAULTS) - {"seed"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def resolve(command, cfg, seed):
    """Effective run config: defaults overlaid by the file, seed applied."""
    block = dict(DEFAULTS[command])
    block.update(cfg.get(command, {}))
    out = {"command": command, "seed": int(seed if seed is not None else cfg.get("seed", 0)), command: block}
    if command == "simulate":
        truth = dict(DEFAULTS["truth"])
        truth.update(cfg.get("truth", {}))
        out["truth"] = truth
    return out


def _build_truth(tcfg, seed):
    tcfg = dict(tcfg)
    if "rho_true" in tcfg:
        tcfg.pop("paper_like", None)
        tcfg["seed"] = seed
        return simkit.ExperimentTruth.from_dict(tcfg)
    pl = tcfg.pop("paper_like", {})
    tcfg.pop("seed", None)
    for k in ("beam_weights", "background_rate_hz", "detector_delays_ps", "detector_efficiencies"):
        if k in tcfg:
            tcfg[k] = tuple(tcfg[k])
    return simkit.paper_like_truth(seed=seed, **pl, **tcfg)


def _settings(pairs):
    return [polopt.WaveplateSetting(float(q), float(h)) for q, h in pairs]


def _tag(setting):
    return f"q{setting.qwp_deg:g}_h{setting.hwp_deg:g}"


def _inputs(value, out, defaults):
    if value is None:
        paths = [out / d for d in defaults]
    elif isinstance(value, str):
        paths = [Path(value)]
    else:
        paths = [Path(v) for v in value]
    for p in paths:
        if not p.exists():
            raise DataError(f"input file not found: {p}")
        read_header(p)
    return paths


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(run, out, threads):
    c = run["simulate"]
    truth = _build_truth(run["truth"], run["seed"])
    settings = _settings(c["settings"])
    counts = simkit.simulate_counts(truth, settings, c["K"])
    written = []
    p = out / "counts.csv"
    polopt.write_counts(p, counts, header(run))
    written.append(p)
    if c["scan"]:
        p = out / "scan.csv"
        polopt.write_counts(p, simkit.simulate_scan(truth), header(run))
        written.append(p)
    p = out / "truth.txt"
    _write(p, "# truth parameters\n" + truth.to_json() + "\n", run)
    written.append(p)
    p = out / "rho_true.txt"
    _write(p, format_density_matrix(truth.rho_true), run)
    written.append(p)
    p = out / "rho_effective.txt"
    _write(p, format_density_matrix(truth.rho_effective), run)
    written.append(p)
    rows = []
    for s in settings:
        for d in (1, 2):
            prob, vis, ph = simkit.fringe_model(truth.rho_effective, s, d, truth.detector_efficiencies)
            rows.append((s.qwp_deg, s.hwp_deg, d, prob, vis, ph))
    p = out / "fringe_truth.csv"
    _write(p, _table(["qwp_deg", "hwp_deg", "detector", "probability", "visibility", "phase"], rows), run)
    written.append(p)
    if c["events"]:
        streams = simkit.simulate_events(truth, settings, c["duration_s"])
        for s, ev in streams.items():
            p = out / f"events_{_tag(s)}.csv"
            with open(p, "w") as fh:
                fh.write(header(run))
                fh.write(f"# setting: {s.qwp_deg:g},{s.hwp_deg:g}\n")
                fh.write(f"# detector_px: {truth.detector_px}\n")
                events.write_events(fh, ev.electron_t, ev.electron_xy, ev.photon_t)
            written.append(p)
    return written


def _event_meta(path):
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            m = re.match(r"#\s*(setting|detector_px):\s*(.*)", line)
            if m:
                meta[m.group(1)] = m.group(2).strip()
    return meta


def _read_event_file(path):
    with open(path) as fh:
        return events.read_events(fh)


def cmd_pipeline(run, out, threads):
    c = run["pipeline"]
    if c["events"] is None:
        paths = sorted(out.glob("events_*.csv"))
        if not paths:
            raise DataError(f"no event files given and none found in {out}")
    else:
        paths = _inputs(c["events"], out, [])
    for p in paths:
        read_header(p)
    count_records, fit_rows, hist_rows, fringe_rows, win_rows = [], [], [], [], []
    for p in paths:
        meta = _event_meta(p)
        if "setting" not in meta:
            raise DataError(f"{p}: missing '# setting: qwp,hwp' line")
        q, h = (float(v) for v in meta["setting"].split(","))
        setting = polopt.WaveplateSetting(q, h)
        px = int(meta.get("detector_px", c["detector_px"]))
        e_t, e_xy, p_t = _read_event_file(p)
        windows = None
        if c["windows"]:
            windows = {int(k): tuple(v) for k, v in c["windows"].items()}
        res = events.process_acquisition(e_t, e_xy, p_t, c["bin_width_ps"], c["range_ps"], c["K"], (px, px), windows)
        effects = polopt.joint_effect_set(setting, c["K"])
        for d, r in res.items():
            for centre, n in zip(r.histogram.centres, r.histogram.counts):
                hist_rows.append((q, h, d, centre, int(n)))
            w = r.window
            win_rows.append((q, h, d, w.t_lo_ps, w.t_hi_ps, w.width_ps, w.background_per_bin, w.snr))
            f = r.fit
            fit_rows.append((q, h, d, f.amplitude, f.visibility, f.phase, f.residual_rms, r.fringe.geometry.period_px, r.fringe.geometry.angle_deg))
            for k, (ph, n) in enumerate(zip(r.fringe.phases, r.fringe.counts)):
                fringe_rows.append((q, h, d, k, ph, n, f.model(ph)))
                # background-subtracted counts are rounded and clipped for the likelihood
                count_records.append(polopt.CountRecord(effects[(d - 1) * c["K"] + k], max(0, int(round(n)))))
    written = []
    p = out / "coincidence_histogram.csv"
    _write(p, _table(["qwp_deg", "hwp_deg", "detector", "offset_ps", "count"], hist_rows), run)
    written.append(p)
    p = out / "coincidence_windows.csv"
    _write(p, _table(["qwp_deg", "hwp_deg", "detector", "t_lo_ps", "t_hi_ps", "width_ps", "background_per_bin", "snr"], win_rows), run)
    written.append(p)
    p = out / "fringe_histogram.csv"
    _write(p, _table(["qwp_deg", "hwp_deg", "detector", "bin", "phase", "count", "fit"], fringe_rows), run)
    written.append(p)
    p = out / "fringe_fits.csv"
    _write(p, _table(["qwp_deg", "hwp_deg", "detector", "amplitude", "visibility", "phase", "residual_rms", "period_px", "angle_deg"], fit_rows), run)
    written.append(p)
    p = out / "fringe_counts.csv"
    polopt.write_counts(p, count_records, header(run))
    written.append(p)
    return written


def cmd_scan_mle(run, out, threads):
    c = run["scan-mle"]
    paths = _inputs(c["counts"], out, ["scan.csv"])
    records = [r for p in paths for r in polopt.read_counts(p) if r.effect.context[0] == "side"]
    if not records:
        raise DataError("no scan records in the input")
    est = mle.QubitMLETomography().fit(records)
    written = []
    for side, rho in est.states_.items():
        p = out / f"photon_state_{side}.txt"
        _write(p, format_density_matrix(rho), run)
        written.append(p)
    rows = [(side, b.x, b.y, b.z) for side, b in est.bloch_.items()]
    text = _table(["side", "x", "y", "z"], rows)
    if est.angle_deg_ is not None:
        text += f"# angle_deg: {est.angle_deg_:.6f}\n"
    p = out / "bloch_report.csv"
    _write(p, text, run)
    written.append(p)
    # observed vs fitted detector-1 fraction for each scan setting
    rows = []
    by_key = {}
    for r in records:
        by_key.setdefault((r.effect.setting, r.effect.context[1]), {})[r.effect.detector] = r.count
    for (s, side), cnt in sorted(by_key.items(), key=lambda kv: (kv[0][1], kv[0][0].qwp_deg, kv[0][0].hwp_deg)):
        tot = sum(cnt.values())
        if side not in est.states_ or tot == 0:
            continue
        pred = float(np.real(np.trace(polopt.photon_effect(s, 1) @ est.states_[side])))
        rows.append((s.qwp_deg, s.hwp_deg, side, cnt.get(1, 0) / tot, pred))
    p = out / "scan_fit.csv"
    _write(p, _table(["qwp_deg", "hwp_deg", "side", "observed_fraction_d1", "fitted_fraction_d1"], rows), run)
    written.append(p)
    return written


def cmd_reconstruct(run, out, threads):
    c = run["reconstruct"]
    paths = _inputs(c["counts"], out, [n for n in ("counts.csv", "scan.csv") if (out / n).exists()] or ["counts.csv"])
    records = [r for p in paths for r in polopt.read_counts(p)]
    chain = dict(c.get("chain", {}))
    chain["seed"] = run["seed"]
    try:
        cfg = bayes.ChainConfig(**chain)
    except TypeError as exc:
        raise UsageError(f"bad chain config: {exc}") from exc
    samples = bayes.run_chains(cfg, records, n_jobs=threads)
    written = []
    p = out / "samples.txt"
    bayes.write_samples(p, samples, header(run))
    written.append(p)
    p = out / "trace.csv"
    bayes.write_trace(p, samples, header(run))
    written.append(p)
    rows = [(ch, a, b) for ch, (a, b) in enumerate(zip(samples.acceptance_rate, samples.beta))]
    p = out / "chain_summary.csv"
    _write(p, _table(["chain", "acceptance_rate", "beta"], rows), run)
    written.append(p)
    return written


def _hist_text(name, s):
    lines = [f"[{name}]", f"mean = {s.mean:.10g}", f"sd = {s.sd:.10g}"]
    if name == "min_pt_eig":
        lines.append(f"sigma_below_zero = {s.mean / s.sd:.6g}" if s.sd > 0 else "sigma_below_zero = inf")
    for k in ("rhat", "ess"):
        if k in s.extra:
            lines.append(f"{k} = {s.extra[k]:.6g}")
    lines.append("histogram_edges = " + ",".join(f"{e:.10g}" for e in s.hist_edges))
    lines.append("histogram_counts = " + ",".join(str(int(n)) for n in s.hist_counts))
    return "\n".join(lines) + "\n"


def _unitary_text(u):
    return "\n".join(" ".join(f"{z.real:.10g}{z.imag:+.10g}j" for z in row) for row in np.asarray(u)) + "\n"


def cmd_analyze(run, out, threads):
    c = run["analyze"]
    (path,) = _inputs(c["samples"], out, ["samples.txt"])
    params, _ = bayes.read_samples(path)
    rhos = bayes.rho_from_params(params)
    bins = int(c["bins"])
    sections = []
    written = []
    mean = rhos.reshape(-1, 4, 4).mean(axis=0)
    sections.append("[posterior_mean]\n" + format_density_matrix(mean))
    fid_u = entangle.bell_fidelity_opt(mean)[1]
    summaries = {}
    for name in ("min_pt_eig", "bell_fidelity", "concurrence", "eof"):
        summaries[name] = bayes.posterior_summary(None, name, bins=bins, rhos=rhos, photon_unitary=fid_u if name == "bell_fidelity" else None)
        sections.append(_hist_text(name, summaries[name]))
    sections.append("[optimal_photon_unitary]\n" + _unitary_text(fid_u))
    if c.get("gamma") is not None:
        gamma = float(c["gamma"])
        corrected = entangle.coherence_correct_state(rhos, gamma)
        f_c, u_c = entangle.bell_fidelity_opt(corrected.reshape(-1, 4, 4).mean(axis=0), validate=False)
        vals = entangle.bell_fidelity_batch(corrected.reshape(-1, 4, 4), u_c)
        cnt, edges = np.histogram(vals, bins=bins)
        s = bayes.Summary("bell_fidelity_corrected", float(vals.mean()), float(vals.std()), cnt, edges, vals)
        sections.append(f"[coherence_correction]\ngamma = {gamma:.10g}\n" + _hist_text("bell_fidelity_corrected", s))
        sections.append("[optimal_photon_unitary_corrected]\n" + _unitary_text(u_c))
    p = out / "report.txt"
    _write(p, "\n".join(sections), run)
    written.append(p)
    for name, s in summaries.items():
        rows = [(lo, hi, int(n)) for lo, hi, n in zip(s.hist_edges[:-1], s.hist_edges[1:], s.hist_counts)]
        p = out / f"hist_{name}.csv"
        _write(p, _table(["lo", "hi", "count"], rows), run)
        written.append(p)
    return written


def cmd_diagnose(run, out, threads):
    c = run["diagnose"]
    (tpath,) = _inputs(c["trace"], out, ["trace.csv"])
    iters, log_post, acc, beta = bayes.read_trace(tpath)
    written = []
    hdr = read_header(tpath) or {}
    burn_frac = hdr.get("reconstruct", {}).get("chain", {}).get("burn_in_fraction", 0.10)
    n_burn = int(round(iters[-1] * burn_frac))
    keep = iters > n_burn
    lp = log_post[:, keep]
    rows = []
    if lp.shape[0] >= 2 and lp.shape[1] >= 10:
        evo = diagnostics.gelman_rubin_evolution(lp, n_points=int(c["n_points"]))
        rows = [(int(n), r) for n, r in evo]
    p = out / "rhat_evolution.csv"
    _write(p, _table(["length", "rhat_log_post"], rows), run)
    written.append(p)
    max_lag = min(int(c["max_lag"]), lp.shape[1] - 1)
    acfs = np.stack([diagnostics.autocorrelation(ch, max_lag) for ch in lp])
    rows = [(k, *acfs[:, k]) for k in range(max_lag + 1)]
    p = out / "autocorrelation.csv"
    _write(p, _table(["lag"] + [f"chain{i}" for i in range(acfs.shape[0])], rows), run)
    written.append(p)
    rows = [(int(it), *acc[:, j], *beta[:, j]) for j, it in enumerate(iters)]
    cols = ["iteration"] + [f"acc{i}" for i in range(acc.shape[0])] + [f"beta{i}" for i in range(beta.shape[0])]
    p = out / "acceptance.csv"
    _write(p, _table(cols, rows), run)
    written.append(p)
    spath = c["samples"] if c["samples"] is not None else (out / "samples.txt")
    if Path(spath).exists():
        read_header(spath)
        params, _ = bayes.read_samples(spath)
        mins = entangle.ppt_min_eigenvalue_batch(bayes.rho_from_params(params).reshape(-1, 4, 4)).reshape(params.shape[:2])
        lines = []
        if mins.shape[0] >= 2 and mins.shape[1] >= 10:
            lines.append(f"rhat_min_pt_eig = {diagnostics.gelman_rubin(mins):.6g}")
        lines.append(f"ess_min_pt_eig = {sum(diagnostics.effective_sample_size(m) for m in mins):.6g}")
        if lp.shape[0] >= 2 and lp.shape[1] >= 10:
            lines.append(f"rhat_log_post = {diagnostics.gelman_rubin(lp):.6g}")
        p = out / "diagnostics.txt"
        _write(p, "\n".join(lines) + "\n", run)
        written.append(p)
    return written


HANDLERS = {
    "simulate": cmd_simulate,
    "pipeline": cmd_pipeline,
    "scan-mle": cmd_scan_mle,
    "reconstruct": cmd_reconstruct,
    "analyze": cmd_analyze,
    "diagnose": cmd_diagnose,
}


def build_parser():
    ap = _Parser(prog="eptomo", description="Electron-photon state tomography toolkit")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", default=".", help="output directory (also the default input location)")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for independent chains")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _error_record(kind, code, message, out=None):
    rec = {"error": kind, "exit_code": code, "message": str(message)}
    text = json.dumps(rec, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None and out.is_dir():
        try:
            (out / "error.json").write_text(text + "\n")
        except OSError:
            pass
    return code


def main(argv=None):
    out = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        cfg = load_config(args.config)
        run = resolve(args.command, cfg, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stale = out / "error.json"
        if stale.exists():
            os.remove(stale)
        written = HANDLERS[args.command](run, out, args.threads)
        for p in written:
            print(p)
        return EXIT_OK
    except UsageError as exc:
        return _error_record("usage", EXIT_USAGE, exc, out)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return _error_record("numerical", EXIT_NUMERICAL, exc, out)
    except (DataError, OSError, ValueError) as exc:
        return _error_record("data", EXIT_DATA, exc, out)


if __name__ == "__main__":
    sys.exit(main())
