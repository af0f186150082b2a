"""Command-line driver: ``pfguide <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 runtime error, 4 budget or cap hit.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import campaign as C
from . import instances as I
from . import samplers as S
from .chain import (
    BudgetExceeded,
    ChainError,
    ParseError,
    ValidationFailed,
    atomic_write_text,
    build_tree_chain,
    load_instance,
    save_instance,
)
from .oracle import OracleError, coverage_constants, divergence_report, theory_bounds
from .vgb import StepCapExceeded

log = logging.getLogger("pfguide")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_BUDGET = 0, 2, 3, 4


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ztilde(s: str):
    return s if s in ("cinf", "pilot") else float(s)


def _kernel_spec(s: str):
    return "uniform" if s == "uniform" else int(s)


def _sampler_config(a, particles: int | None = None) -> S.SamplerConfig:
    return S.SamplerConfig(
        particles=particles if particles is not None else a.particles,
        resampling=a.resampling,
        eta=a.eta,
        c_inf=a.cinf,
        z_tilde=a.ztilde,
        max_restarts=a.max_restarts,
        strict=a.strict,
    )


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _sidecar(out: str, params: dict) -> None:
    atomic_write_text(out + ".params.json", C.dumps(params))


# --------------------------------------------------------------------------- commands


def cmd_validate(a) -> int:
    inst = load_instance(a.instance)
    print(f"ok {inst.content_hash} horizon={inst.horizon} states={sum(inst.sizes)}")
    return EXIT_OK


def cmd_oracle(a) -> int:
    inst = load_instance(a.instance)
    rep = divergence_report(inst, a.M)
    cov = coverage_constants(inst, a.eta_list)
    payload = {
        "instance": inst.name,
        "instance_hash": inst.content_hash,
        "divergences": rep.to_dict(),
        "coverage": cov.to_dict(),
        "bounds": {str(N): theory_bounds(inst, N, a.M[0] if a.M else 2.0, report=rep, cov=cov).to_dict() for N in a.particles_list},
    }
    _emit(C.dumps(payload), a.out)
    return EXIT_OK


def _timed_rows(a, fn):
    t0 = time.perf_counter()
    rows = fn()
    ms = (time.perf_counter() - t0) * 1e3
    if a.timing:
        for r in rows:
            r["wall_ms"] = ms / len(rows)
    return rows


def cmd_run(a) -> int:
    cfg = C.CampaignConfig(a.instance, a.algo, _sampler_config(a), a.trials, a.seed, a.workers, a.out)
    inst = load_instance(cfg.instance_path)
    holder = {}

    def go():
        batch = C.run_campaign(inst, cfg.algo, cfg.sampler, cfg.trials, cfg.seed, workers=cfg.workers)
        holder.update(C.summarize(inst, batch, cfg.algo, cfg.sampler.particles, cfg.seed))
        return [holder["row"]]

    rows = _timed_rows(a, go)
    cols = C.SUMMARY_COLUMNS + (("wall_ms",) if a.timing else ())
    text = C.rows_to_csv(rows, cols)
    if a.out:
        C.write_outputs(a.out, text, {**rows[0], **holder["extras"]})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(a) -> int:
    inst = load_instance(a.instance)
    base = _sampler_config(a, particles=1)
    algos = [x.strip() for x in a.algos.split(",")]
    for algo in algos:
        if algo not in C.ALGOS:
            raise C.CampaignError(f"unknown algorithm {algo!r}")
    rows = _timed_rows(
        a,
        lambda: C.sweep(
            inst, algos, a.particles_list, base, a.trials, a.seed, workers=a.workers, M=a.M, bound_eta=a.bound_eta,
            progress=log.info,
        ),
    )
    cols = C.SUMMARY_COLUMNS + C.BOUND_COLUMNS + (("wall_ms",) if a.timing else ())
    text = C.rows_to_csv(rows, cols)
    if a.out:
        C.write_outputs(a.out, text, {"rows": rows})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_couple(a) -> int:
    inst = load_instance(a.instance)
    rep = C.coupling_report(
        inst, a.particles, a.trials, a.seed, pairs=a.pairs, workers=a.workers, step_cap=a.step_cap, alpha=a.alpha
    )
    if rep["cap_hits"]:
        log.warning("%d walks hit the step cap and were excluded", rep["cap_hits"])
    _emit(C.dumps(rep), a.out)
    for lv in rep["levels"]:
        print(f"level {lv['level']}: p={lv['pvalue']} {'pass' if lv['pass'] else 'FAIL'}", file=sys.stderr)
    print(f"constructive {rep['constructive']['equal']}/{rep['constructive']['pairs']}", file=sys.stderr)
    return EXIT_OK if rep["pass"] else EXIT_RUNTIME


def _save(a, inst, params: dict) -> int:
    save_instance(a.out, inst)
    _sidecar(a.out, {"instance_hash": inst.content_hash, **params})
    print(f"wrote {a.out} {inst.content_hash}")
    return EXIT_OK


def cmd_make_lower(a) -> int:
    inst = I.build_smc_lower(a.H, a.lam, a.representation, budget=a.budget)
    return _save(a, inst, {"generator": "smc-lower", "H": a.H, "lambda": a.lam, "representation": a.representation})


def cmd_make_varblow(a) -> int:
    return _save(a, I.build_var_blowup(a.H), {"generator": "var-blowup", "H": a.H})


def cmd_make_myopic(a) -> int:
    con = I.build_myopic_lb(a.N, a.h_schedule, a.gamma_schedule, rng=np.random.default_rng(a.seed))
    inst = con.instance(a.representation, budget=a.budget)
    params = {
        "generator": "myopic",
        "N": a.N,
        "h_schedule": list(con.h_schedule),
        "gamma_schedule": list(con.gamma_schedule),
        "ystar": con.ystar.tolist(),
        "seed": a.seed,
        "representation": a.representation,
    }
    return _save(a, inst, params)


def _tree(spec: str, conc: float, a):
    spec = _kernel_spec(spec)
    if spec == "uniform":
        return spec
    return build_tree_chain(a.alphabet, a.horizon, spec, budget=a.budget, concentration=conc)


def cmd_make_kswitch(a) -> int:
    inst = I.build_kernel_switch(
        _tree(a.base, 1.0, a), _tree(a.perturbed, a.perturbed_concentration, a), a.alpha, a.horizon, a.alphabet,
        target_kernel_spec=_tree(a.target, a.target_concentration, a), budget=a.budget,
    )
    params = {
        "generator": "kernel-switch",
        "base": a.base,
        "perturbed": a.perturbed,
        "target": a.target,
        "perturbed_concentration": a.perturbed_concentration,
        "target_concentration": a.target_concentration,
        "alpha": a.alpha,
        "horizon": a.horizon,
        "alphabet": a.alphabet,
    }
    return _save(a, inst, params)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfguide", description="Particle-filter guidance experiments on layered chains.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, sampler=True):
        sp.add_argument("--instance", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out")
        if sampler:
            sp.add_argument("--particles", type=int, default=1)
            sp.add_argument("--trials", type=int, default=1000)
            sp.add_argument("--resampling", choices=S.RESAMPLING, default="multinomial")
            sp.add_argument("--eta", type=float)
            sp.add_argument("--cinf", type=float)
            sp.add_argument("--ztilde", type=_ztilde, default="cinf")
            sp.add_argument("--max-restarts", type=int, default=1000)
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--strict", dest="strict", action="store_true", default=True)
            g.add_argument("--clamp", dest="strict", action="store_false")
            sp.add_argument("--timing", action="store_true", help="add a wall_ms column (not reproducible)")

    sp = sub.add_parser("validate", help="parse and validate an instance file")
    sp.add_argument("--instance", required=True)
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("oracle", help="exact divergences, coverage constants and bounds")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--M", type=_floats, default=[2.0])
    sp.add_argument("--eta-list", type=_floats, default=[])
    sp.add_argument("--particles-list", type=_ints, default=[1])
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("run", help="one trial campaign")
    common(sp)
    sp.add_argument("--algo", choices=C.ALGOS, required=True)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("sweep", help="campaigns over particle counts with bound columns")
    common(sp)
    sp.add_argument("--algos", default="smc")
    sp.add_argument("--particles-list", type=_ints, default=[2, 4, 8, 16, 32, 64, 128, 256])
    sp.add_argument("--M", type=float, default=2.0)
    sp.add_argument("--bound-eta", type=float)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("couple", help="walk versus branching-process coupling report")
    common(sp, sampler=False)
    sp.add_argument("--particles", type=int, default=3)
    sp.add_argument("--trials", type=int, default=50_000)
    sp.add_argument("--pairs", type=int, default=1000)
    sp.add_argument("--step-cap", type=int, default=10**6)
    sp.add_argument("--alpha", type=float, default=0.01)
    sp.set_defaults(fn=cmd_couple)

    sp = sub.add_parser("make-lower", help="SMC lower-bound instance")
    sp.add_argument("--H", type=int, default=32)
    sp.add_argument("--lam", type=float, default=1.0)
    sp.add_argument("--representation", choices=("tree", "counts"), default="counts")
    sp.add_argument("--budget", type=int, default=2**20)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_make_lower)

    sp = sub.add_parser("make-varblow", help="variance blow-up instance")
    sp.add_argument("--H", type=int, default=20)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_make_varblow)

    sp = sub.add_parser("make-myopic", help="myopic lower-bound instance")
    sp.add_argument("--N", type=int, default=1)
    sp.add_argument("--h-schedule", type=_ints, default=[64])
    sp.add_argument("--gamma-schedule", type=_floats, default=[0.25])
    sp.add_argument("--representation", choices=("tree", "lumped"), default="lumped")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--budget", type=int, default=2**20)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_make_myopic)

    sp = sub.add_parser("make-kswitch", help="kernel-switch instance")
    sp.add_argument("--base", default="uniform", help="'uniform' or an integer Dirichlet seed")
    sp.add_argument("--perturbed", default="1")
    sp.add_argument("--target", default="2")
    sp.add_argument("--perturbed-concentration", type=float, default=1.0)
    sp.add_argument("--target-concentration", type=float, default=1.0)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--horizon", type=int, default=12)
    sp.add_argument("--alphabet", type=int, default=2)
    sp.add_argument("--budget", type=int, default=2**20)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_make_kswitch)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ValidationFailed as exc:
        print(f"invalid instance:\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (BudgetExceeded, StepCapExceeded, S.MaxRestartsExceeded) as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (S.SamplerConfigError, C.CampaignError, I.ScheduleInvalid, ValueError) as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (S.SamplerError, OracleError, ChainError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
