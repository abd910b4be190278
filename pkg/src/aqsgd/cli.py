"""Command line front end: ``aqsgd {train,verify,sweep,simnet}``."""

from __future__ import annotations

import argparse
import itertools
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import simnet
from .analysis import audit_json
from .config import RunManifest, RunSpec, load_spec
from .protocol import ConfigError
from .reporting import dumps, metrics_csv, summary
from .runner import audit_run, execute
from .verify import SUITES, run_suite

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _buffer_bits(v: str):
    return "full" if v.lower() == "full" else int(v)


def _csv_list(kind):
    def parse(v: str):
        return [kind(s) for s in v.split(",") if s.strip()]

    return parse


def _overrides(args) -> dict:
    out = {}
    for key, attr in (("seed", "seed"), ("mode", "mode"), ("fw_bits", "fw_bits"), ("bw_bits", "bw_bits"),
                      ("stages", "stages"), ("epochs", "epochs"), ("lr", "lr")):
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    bb = getattr(args, "buffer_bits", None)
    if bb is not None:
        out["buffer_bits"] = None if bb == "full" else bb
    return out


def _read_spec(args, **extra) -> RunSpec:
    text = Path(args.config).read_text() if args.config else ""
    return load_spec(text, **{**_overrides(args), **extra})


def _lr(v: str):
    return "theorem" if v == "theorem" else float(v)


def add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("fp32", "directq", "aqsgd"))
    p.add_argument("--fw-bits", type=int)
    p.add_argument("--bw-bits", type=int)
    p.add_argument("--buffer-bits", type=_buffer_bits, help="'full' or an integer bit width")
    p.add_argument("--stages", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=_lr, help="float or 'theorem'")


def cmd_train(args) -> int:
    spec = _read_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.audit:
        result, reports = audit_run(spec)
        (out / "audit.json").write_text(audit_json(*reports.values()) + "\n")
    else:
        result, *_ = execute(spec)
    analysis = args.audit
    (out / "metrics.csv").write_text(metrics_csv(result.metrics, spec.stages, analysis))
    (out / "summary.json").write_text(dumps(summary(result, spec)))
    outputs = {"metrics": "metrics.csv", "summary": "summary.json"}
    if args.audit:
        outputs["audit"] = "audit.json"
    (out / "manifest.json").write_text(RunManifest(spec.to_text(), [spec.seed], outputs).to_json() + "\n")
    state = "diverged" if result.diverged else f"final loss {result.final_loss:.6g}"
    print(f"{spec.mode} K={spec.stages}: {len(result.metrics)} steps, {state}; wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    ok = True
    for name in names:
        rep = run_suite(name)
        for line in rep.lines():
            print(line)
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_FAIL


def _cell(spec_text_and_seed):
    text, seed = spec_text_and_seed
    spec = load_spec(text, seed=seed)
    result, *_ = execute(spec, analysis=False)
    return result.final_loss, result.diverged


SWEEP_FIELDS = ("mode", "stages", "fw_bits", "bw_bits", "buffer_bits", "seeds", "final_loss_mean",
                "final_loss_std", "diverged")


def cmd_sweep(args) -> int:
    base = _read_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = list(itertools.product(args.modes, args.stages_list, args.fw_bits_list, args.bw_bits_list,
                                  args.buffer_bits_list))
    cells = []
    for mode, K, fw, bw, z in grid:
        spec = base.with_(mode=mode, stages=K, fw_bits=fw, bw_bits=bw, buffer_bits=None if z == "full" else z)
        cells.append((spec, [(spec.to_text(), s) for s in args.seeds]))
    jobs = [job for _, js in cells for job in js]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    lines = [",".join(SWEEP_FIELDS)]
    rows, i = [], 0
    for spec, js in cells:
        res = results[i: i + len(js)]
        i += len(js)
        losses = [r[0] for r in res if not r[1]]
        mean = float(np.mean(losses)) if losses else math.nan
        std = float(np.std(losses)) if losses else math.nan
        z = "full" if spec.buffer_bits is None else spec.buffer_bits
        row = dict(mode=spec.mode, stages=spec.stages, fw_bits=spec.fw_bits, bw_bits=spec.bw_bits,
                   buffer_bits=z, seeds=len(js), final_loss_mean=mean, final_loss_std=std,
                   diverged=sum(r[1] for r in res))
        rows.append(row)
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in SWEEP_FIELDS))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    comparisons = []
    for r in rows:
        if r["mode"] != "aqsgd":
            continue
        for d in rows:
            if d["mode"] == "directq" and all(d[k] == r[k] for k in ("stages", "fw_bits", "bw_bits")):
                comparisons.append({
                    "stages": r["stages"], "fw_bits": r["fw_bits"], "bw_bits": r["bw_bits"],
                    "buffer_bits": r["buffer_bits"], "aqsgd_final_loss": r["final_loss_mean"],
                    "directq_final_loss": d["final_loss_mean"],
                    "aqsgd_le_directq": bool(r["final_loss_mean"] <= d["final_loss_mean"]),
                })
    (out / "comparison.json").write_text(dumps({"comparisons": comparisons}))
    print(f"{len(rows)} cells x {len(args.seeds)} seeds; wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_simnet(args) -> int:
    p = simnet.preset(args.preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comps = [simnet.Compression(simnet.RAW32)]
    for fw, bw in zip(args.fw_bits_list, args.bw_bits_list):
        comps += [simnet.Compression(simnet.DIRECTQ, fw, bw), simnet.Compression(simnet.AQSGD, fw, bw)]
    rows = simnet.sweep(p, simnet.bandwidth_grid(args.min_bps, args.max_bps, args.points), comps, args.latency)
    (out / "simnet.csv").write_text(simnet.sweep_csv(rows))
    bands = simnet.ratio_bands(p, bits=(args.fw_bits_list[0], args.bw_bits_list[0]))
    (out / "bands.json").write_text(dumps(bands))
    print(f"raw32 10Gbps/100Mbps ratio {bands['raw32_ratio']:.2f}x; "
          f"fw{bands['bits_fw']}/bw{bands['bits_bw']} drop {100 * bands['compressed_drop']:.1f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aqsgd", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training configuration")
    add_run_flags(t)
    t.add_argument("--audit", action="store_true", help="record error decompositions and write audit.json")
    t.add_argument("--out", default="out", help="output directory")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run a self-check suite")
    v.add_argument("suite", choices=SUITES + ("all",))
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="final loss over a mode x stages x bits grid")
    add_run_flags(s)
    s.add_argument("--modes", type=_csv_list(str), default=["aqsgd", "directq"])
    s.add_argument("--stages-list", type=_csv_list(int), default=[2, 4])
    s.add_argument("--fw-bits-list", type=_csv_list(int), default=[2, 4])
    s.add_argument("--bw-bits-list", type=_csv_list(int), default=[4])
    s.add_argument("--buffer-bits-list", type=_csv_list(_buffer_bits), default=["full"])
    s.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_sweep)

    n = sub.add_parser("simnet", help="throughput model sweep over bandwidth")
    n.add_argument("--preset", default="gpt2xl-8stage", choices=sorted(simnet.PRESETS))
    n.add_argument("--fw-bits-list", type=_csv_list(int), default=[4])
    n.add_argument("--bw-bits-list", type=_csv_list(int), default=[4])
    n.add_argument("--min-bps", type=float, default=1e7)
    n.add_argument("--max-bps", type=float, default=1e11)
    n.add_argument("--points", type=int, default=100)
    n.add_argument("--latency", type=float, default=0.0)
    n.add_argument("--out", default="out")
    n.set_defaults(func=cmd_simnet)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
