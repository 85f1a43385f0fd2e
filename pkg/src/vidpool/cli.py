"""Command-line pipeline: data generation, background-model training, code
extraction, end-to-end training, evaluation, gradient checks, and the
co-watch recommendation experiments.

Every subcommand is deterministic given --seed and prints its fully
resolved configuration before doing any work.  Exit codes: 0 success,
1 usage error, 2 data/validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import deeppool, metrics, pooling, reco, synth, training
from .classifier import HeadConfig, init_head
from .data import Dataset, read_vseq, write_vseq
from .gmm import COV_KINDS, EmConfig, em_fit, read_gmm, write_gmm
from .prng import Stream, derive_seed

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we reserve 2 for data errors
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key=value file; explicit flags still win")
    p.add_argument("--threads", type=int, default=1, help="worker threads where supported")


def build_parser() -> _Parser:
    p = _Parser(prog="vidpool", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-synth", parents=[], help="generate a synthetic classification dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--clusters", type=int, default=16)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--videos-per-class", type=int, default=50)
    g.add_argument("--frames-min", type=int, default=20)
    g.add_argument("--frames-max", type=int, default=60)
    g.add_argument("--spread", type=float, default=0.25)
    _add_common(g)

    c = sub.add_parser("gen-cowatch", help="simulate co-watch sessions over a dataset")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--users", type=int, default=60)
    c.add_argument("--sessions", type=int, default=6)
    c.add_argument("--per-session", type=int, default=8)
    c.add_argument("--affinity", type=float, default=4.0)
    _add_common(c)

    u = sub.add_parser("train-ubm", help="fit the background mixture model")
    u.add_argument("--data", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--k", type=int, default=256)
    u.add_argument("--cov", choices=COV_KINDS, default="diagonal")
    u.add_argument("--max-iters", type=int, default=50)
    u.add_argument("--frames-per-video", type=int, default=30)
    _add_common(u)

    e = sub.add_parser("extract", help="write pooled video codes")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ubm", help="background model (required except --pool avg)")
    e.add_argument("--pool", choices=("avg", "bow", "vlad", "sgmm"), default="sgmm")
    e.add_argument("--gamma", type=float, default=0.125)
    e.add_argument("--intra-norm", action="store_true")
    e.add_argument("--final-norm", action="store_true")
    _add_common(e)

    t = sub.add_parser("train", help="train pooling + classifier end to end")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="CSV metric log path")
    t.add_argument("--pool", choices=("netvlad", "dsgmm", "avg"), default="dsgmm")
    t.add_argument("--variant", choices=deeppool.VARIANTS, default="decoupled")
    t.add_argument("--k", type=int, default=256)
    t.add_argument("--gamma", type=float, default=0.125)
    t.add_argument("--intra-norm", action="store_true")
    t.add_argument("--final-norm", action="store_true")
    t.add_argument("--experts", type=int, default=2)
    t.add_argument("--ubm", help="init from this model instead of fitting one")
    t.add_argument("--lr", type=float, default=0.0002)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--max-steps", type=int, default=200)
    t.add_argument("--eval-every", type=int, default=50)
    t.add_argument("--frames-per-video", type=int, default=30)
    t.add_argument("--decay-every", type=int, default=2000, help="desk-scale default")
    t.add_argument("--decay-factor", type=float, default=0.8)
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_common(t)

    v = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    v.add_argument("--data", required=True)
    v.add_argument("--ckpt", required=True)
    v.add_argument("--which", choices=("best", "last"), default="best")
    v.add_argument("--out", help="also write the JSON here")
    _add_common(v)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--pool", choices=("netvlad", "dsgmm"), default="dsgmm")
    gc.add_argument("--variant", choices=deeppool.VARIANTS, default="diagonal")
    gc.add_argument("--k", type=int, default=4)
    gc.add_argument("--dim", type=int, default=5)
    gc.add_argument("--classes", type=int, default=3)
    gc.add_argument("--gamma", type=float, default=0.125)
    gc.add_argument("--intra-norm", action="store_true")
    gc.add_argument("--final-norm", action="store_true")
    _add_common(gc)

    rt = sub.add_parser("reco-train", help="train co-watch embeddings (triplet loss)")
    rt.add_argument("--data", required=True)
    rt.add_argument("--cowatch", required=True)
    rt.add_argument("--out", required=True)
    rt.add_argument("--ubm", help="init pooling from this model instead of fitting one")
    rt.add_argument("--pool", choices=("netvlad", "dsgmm"), default="dsgmm")
    rt.add_argument("--variant", choices=deeppool.VARIANTS, default="decoupled")
    rt.add_argument("--k", type=int, default=8)
    rt.add_argument("--gamma", type=float, default=0.125)
    rt.add_argument("--embed-dim", type=int, default=64)
    rt.add_argument("--hidden", type=int, default=256)
    rt.add_argument("--alpha", type=float, default=0.2)
    rt.add_argument("--lr", type=float, default=0.0002)
    rt.add_argument("--batch-triplets", type=int, default=16)
    rt.add_argument("--max-steps", type=int, default=100)
    _add_common(rt)

    re_ = sub.add_parser("reco-eval", help="similarity and GLMix watch prediction")
    re_.add_argument("--data", required=True)
    re_.add_argument("--cowatch", required=True)
    re_.add_argument("--ckpt", required=True)
    re_.add_argument("--prior", type=float, default=1.0)
    re_.add_argument("--out", help="also write the JSON here")
    _add_common(re_)

    return p


def _apply_config_file(parser: _Parser, argv: list[str], args: argparse.Namespace):
    """Config file values override defaults; explicit flags override both."""
    if not getattr(args, "config", None):
        return args
    overrides = {}
    with open(args.config) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{args.config}:{line_no}: expected key=value")
            key, val = line.split("=", 1)
            overrides[key.strip().replace("-", "_")] = val.strip()
    sub_actions = [a for a in parser._subparsers._group_actions][0]
    subparser = sub_actions.choices[args.command]
    valid = {a.dest: a for a in subparser._actions}
    for key, raw in overrides.items():
        if key not in valid:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = valid[key]
        if isinstance(action, (argparse._StoreTrueAction,)):
            subparser.set_defaults(**{key: raw.lower() in ("1", "true", "yes")})
        elif action.type is not None:
            subparser.set_defaults(**{key: action.type(raw)})
        else:
            subparser.set_defaults(**{key: raw})
    return parser.parse_args(argv)


def _print_config(args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    print(f"# {args.command} config " + json.dumps(cfg, sort_keys=True, default=str))


def _sample_pool_frames(ds: Dataset, per_video: int, seed: int) -> np.ndarray:
    """Frames pooled across videos for background-model fitting."""
    s = Stream(seed, "ubm-frames")
    chunks = []
    for rec in ds.records:
        t = rec.frames.shape[0]
        take = min(per_video, t)
        idx = s.permutation(t)[:take]
        chunks.append(rec.frames[np.sort(idx)])
    return np.concatenate(chunks, axis=0)


def _fit_or_load_ubm(args, ds: Dataset, cov_kind: str, k: int):
    if getattr(args, "ubm", None):
        return read_gmm(args.ubm)
    frames = _sample_pool_frames(ds, getattr(args, "frames_per_video", 30), args.seed)
    model, _ = em_fit(
        frames, k, cov_kind, EmConfig(max_iters=30, seed=derive_seed(args.seed, "ubm"))
    )
    return model


# --- subcommand bodies -------------------------------------------------------


def _cmd_gen_synth(args) -> int:
    cfg = synth.SynthConfig(
        num_classes=args.classes,
        num_clusters_true=args.clusters,
        dim=args.dim,
        videos_per_class=args.videos_per_class,
        frames_min=args.frames_min,
        frames_max=args.frames_max,
        cluster_spread=args.spread,
        seed=args.seed,
    )
    ds = synth.gen_classification(cfg)
    write_vseq(ds, args.out)
    print(json.dumps({"videos": len(ds.records), "dim": ds.dim, "classes": ds.num_classes}))
    return 0


def _cmd_gen_cowatch(args) -> int:
    ds = read_vseq(args.data)
    cw = synth.gen_cowatch(
        args.users,
        ds,
        affinity_seed=args.seed,
        sessions_per_user=args.sessions,
        videos_per_session=args.per_session,
        affinity=args.affinity,
    )
    synth.save_cowatch(cw, args.out)
    print(
        json.dumps(
            {
                "interactions": len(cw.interactions),
                "pairs": len(cw.pairs),
                "triplets": len(cw.triplets),
            }
        )
    )
    return 0


def _cmd_train_ubm(args) -> int:
    ds = read_vseq(args.data)
    frames = _sample_pool_frames(ds, args.frames_per_video, args.seed)
    model, history = em_fit(
        frames,
        args.k,
        args.cov,
        EmConfig(max_iters=args.max_iters, seed=derive_seed(args.seed, "ubm")),
    )
    write_gmm(model, args.out)
    print(json.dumps({"k": model.k, "dim": model.dim, "final_loglik": history[-1], "iters": len(history)}))
    return 0


def _cmd_extract(args) -> int:
    ds = read_vseq(args.data)
    ubm = None
    if args.pool != "avg":
        if not args.ubm:
            raise UsageError("--ubm is required unless --pool avg")
        ubm = read_gmm(args.ubm)
        if ubm.dim != ds.dim:
            raise ValueError(f"model dim {ubm.dim} != data dim {ds.dim}")

    def one(rec):
        if args.pool == "avg":
            code = pooling.avg_pool(rec)
            return rec.id, pooling.normalize(code, args.intra_norm, args.final_norm)
        stats = pooling.accumulate(ubm, rec, second_moment="none")
        if args.pool == "bow":
            code = pooling.bow_code(stats)
            return rec.id, pooling.normalize(code, args.intra_norm, args.final_norm)
        if args.pool == "vlad":
            code = pooling.vlad_code(stats, ubm)
            return rec.id, pooling.normalize(code, args.intra_norm, args.final_norm)
        return rec.id, pooling.sgmm_code(stats, ubm, args.gamma, args.intra_norm, args.final_norm)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as ex:
            codes = list(ex.map(one, ds.records))
    else:
        codes = [one(rec) for rec in ds.records]
    pooling.write_vcod(args.out, codes)
    print(json.dumps({"videos": len(codes), "pool": args.pool, "out": args.out}))
    return 0


def _build_train_model(args, ds: Dataset):
    if args.pool == "avg":
        head = init_head(
            HeadConfig(ds.dim, ds.num_classes, args.experts), seed=derive_seed(args.seed, "head")
        )
        return training.Model("avg", ds.num_classes, head)
    variant = args.variant
    code_kind = "vlad" if args.pool == "netvlad" else "dsgmm"
    cov_kind = deeppool._INIT_COV_KIND[variant]
    ubm = _fit_or_load_ubm(args, ds, cov_kind, args.k)
    if ubm.dim != ds.dim:
        raise ValueError(f"model dim {ubm.dim} != data dim {ds.dim}")
    params, spec = deeppool.init_from_ubm(
        ubm, variant, code_kind, gamma=args.gamma, intra_norm=args.intra_norm, final_norm=args.final_norm
    )
    head = init_head(
        HeadConfig(spec.k * ds.dim, ds.num_classes, args.experts),
        seed=derive_seed(args.seed, "head"),
    )
    return training.Model(args.pool if args.pool != "netvlad" else "vlad", ds.num_classes, head, spec, params)


def _train_config(args) -> training.TrainConfig:
    return training.TrainConfig(
        lr=args.lr,
        decay_factor=args.decay_factor,
        decay_every=args.decay_every,
        frames_per_video=args.frames_per_video,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        eval_every=args.eval_every,
        val_fraction=args.val_fraction,
        seed=args.seed,
    )


def _cmd_train(args) -> int:
    ds = read_vseq(args.data)
    cfg = _train_config(args)
    if args.resume:
        ckpt = training.load_checkpoint(args.resume)
        result = training.train(ds, None, cfg, log_path=args.log, checkpoint_path=args.out, resume=ckpt)
    else:
        model = _build_train_model(args, ds)
        result = training.train(ds, model, cfg, log_path=args.log, checkpoint_path=args.out)
    last = result.log_rows[-1] if result.log_rows else {}
    print(
        json.dumps(
            {
                "steps": result.checkpoint.step,
                "best_step": result.checkpoint.best_step,
                "best_val_loss": result.checkpoint.best_val_loss,
                "final_gap": last.get("gap"),
                "final_hit1": last.get("hit1"),
            }
        )
    )
    return 0


def _cmd_eval(args) -> int:
    ds = read_vseq(args.data)
    ckpt = training.load_checkpoint(args.ckpt)
    model = training.model_from_meta(ckpt.meta)
    model.set_arrays(ckpt.best_params if args.which == "best" else ckpt.params)
    _, gap_val, hit1 = training.evaluate(model, ds)
    doc = {"gap": gap_val, "hit1": hit1, "n_videos": len(ds.records)}
    out = json.dumps(doc, sort_keys=True)
    print(out)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    s = Stream(args.seed, "gradcheck-init")
    k, d = args.k, args.dim
    variant = args.variant
    code_kind = "vlad" if args.pool == "netvlad" else "dsgmm"
    if variant == "decoupled":
        params = deeppool.AssignmentParams(variant, u=s.normal((k, d)), b=s.normal(k) * 0.1)
        anchors = s.normal((k, d))
    else:
        if variant in ("uniform_priors", "shared_spherical"):
            ls = np.array(s.normal() * 0.2)
        elif variant == "spherical":
            ls = s.normal(k) * 0.2
        elif variant == "shared_diagonal":
            ls = s.normal(d) * 0.2
        else:
            ls = s.normal((k, d)) * 0.2
        logit_w = None if variant == "uniform_priors" else s.normal(k) * 0.3
        params = deeppool.AssignmentParams(variant, logit_w=logit_w, means=s.normal((k, d)), log_scale=ls)
        anchors = None
    spec = deeppool.PoolSpec(
        code_kind,
        k,
        gamma=args.gamma,
        anchor_means=anchors,
        intra_norm=args.intra_norm,
        final_norm=args.final_norm,
    )
    head = init_head(HeadConfig(k * d, args.classes), seed=derive_seed(args.seed, "head"))
    model = training.Model(
        "dsgmm" if code_kind == "dsgmm" else "vlad", args.classes, head, spec, params
    )
    report = training.gradcheck(model, seed=args.seed)
    worst = max(report.values())
    for name in sorted(report):
        print(f"{name}: {report[name]:.3e}")
    print(f"max_rel_err: {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    if worst >= GRADCHECK_TOL:
        print("gradcheck FAILED", file=sys.stderr)
        return 2
    return 0


def _cmd_reco_train(args) -> int:
    ds = read_vseq(args.data)
    cw = synth.load_cowatch(args.cowatch)
    if not cw.triplets:
        raise ValueError("co-watch log has no triplets")
    code_kind = "vlad" if args.pool == "netvlad" else "dsgmm"
    cov_kind = deeppool._INIT_COV_KIND[args.variant]
    ubm = _fit_or_load_ubm(args, ds, cov_kind, args.k)
    params, spec = deeppool.init_from_ubm(ubm, args.variant, code_kind, gamma=args.gamma)
    layer = reco.PoolingLayer(spec, params)
    net = reco.init_embed(
        spec.k * ds.dim, args.embed_dim, args.hidden, seed=derive_seed(args.seed, "embed")
    )

    frames_by_id = {rec.id: rec.frames for rec in ds.records}
    trainable = {"net." + n: a for n, a in net.trainable().items()}
    trainable.update({"pool." + n: a for n, a in layer.trainable().items()})
    state = training.AdamState()
    tcfg = training.TrainConfig(lr=args.lr, seed=args.seed, max_steps=args.max_steps)
    losses = []
    for step in range(args.max_steps):
        pick = Stream(args.seed, "trip", step)
        idx = pick.integers(len(cw.triplets), size=args.batch_triplets)
        batch = [reco.Triplet(*cw.triplets[int(i)]) for i in idx]
        loss, grads = reco.triplet_loss(
            net, layer, frames_by_id, batch, alpha=args.alpha
        )
        training.adam_step(trainable, grads, state, tcfg, lr=training.lr_at(tcfg, step))
        losses.append(loss)

    meta = {
        "kind": "reco",
        "pool_kind": code_kind,
        "variant": args.variant,
        "k": spec.k,
        "dim": ds.dim,
        "gamma": spec.gamma,
        "intra_norm": spec.intra_norm,
        "final_norm": spec.final_norm,
        "shared_anchors": spec.anchor_means is None,
        "embed": {"in_dim": net.in_dim, "hidden": net.w1.shape[0], "embed_dim": net.embed_dim},
        "alpha": args.alpha,
    }
    ckpt = training.Checkpoint(
        step=args.max_steps,
        seed=args.seed,
        params={n: a.copy() for n, a in trainable.items()},
        adam=state,
        best_step=args.max_steps,
        best_val_loss=None,
        best_params={n: a.copy() for n, a in trainable.items()},
        meta=meta,
    )
    training.save_checkpoint(ckpt, args.out)
    print(json.dumps({"steps": args.max_steps, "first_loss": losses[0], "last_loss": losses[-1]}))
    return 0


def _reco_from_checkpoint(ckpt) -> tuple[reco.EmbedNet, reco.PoolingLayer]:
    meta = ckpt.meta
    if meta.get("kind") != "reco":
        raise ValueError("not a reco checkpoint")
    emeta = meta["embed"]
    net = reco.init_embed(emeta["in_dim"], emeta["embed_dim"], emeta["hidden"], seed=0)
    k, d = meta["k"], meta["dim"]
    variant = meta["variant"]
    if variant == "decoupled":
        params = deeppool.AssignmentParams(variant, u=np.zeros((k, d)), b=np.zeros(k))
    else:
        if variant in ("uniform_priors", "shared_spherical"):
            ls = np.zeros(())
        elif variant == "spherical":
            ls = np.zeros(k)
        elif variant == "shared_diagonal":
            ls = np.zeros(d)
        else:
            ls = np.zeros((k, d))
        logit_w = None if variant == "uniform_priors" else np.zeros(k)
        params = deeppool.AssignmentParams(variant, logit_w=logit_w, means=np.zeros((k, d)), log_scale=ls)
    spec = deeppool.PoolSpec(
        meta["pool_kind"],
        k,
        gamma=meta["gamma"],
        anchor_means=None if meta["shared_anchors"] else np.zeros((k, d)),
        intra_norm=meta["intra_norm"],
        final_norm=meta["final_norm"],
    )
    layer = reco.PoolingLayer(spec, params)
    arrays = {"net." + n: a for n, a in net.trainable().items()}
    arrays.update({"pool." + n: a for n, a in layer.trainable().items()})
    if set(arrays) != set(ckpt.params):
        raise ValueError("checkpoint parameters do not match the reco structure")
    for name, arr in arrays.items():
        arr[...] = ckpt.params[name]
    return net, layer


def _cmd_reco_eval(args) -> int:
    ds = read_vseq(args.data)
    cw = synth.load_cowatch(args.cowatch)
    ckpt = training.load_checkpoint(args.ckpt)
    net, layer = _reco_from_checkpoint(ckpt)

    embeddings = {}
    for rec in ds.records:
        code, _ = deeppool.forward(layer.spec, layer.params, rec.frames)
        embeddings[rec.id] = reco.embed(net, code.reshape(1, -1))[0]

    train_it, test_it = reco.split_sessions(cw)
    history = reco.build_history(train_it)
    seen = set()
    for vids in history.user_videos.values():
        seen |= vids

    scored_users = set(history.users())
    rows = [it for it in test_it if it.user_id in scored_users]
    if not rows:
        raise ValueError("no evaluable interactions: every user has an empty history")
    labels = np.array([it.label for it in rows])
    avg_s, max_s = [], []
    for it in rows:
        a, m = reco.sim_scores(embeddings, history, it.user_id, it.video_id)
        avg_s.append(a)
        max_s.append(m)

    obs_train = reco.glmix_observations(train_it, embeddings, net.embed_dim)
    glm = reco.glmix_fit(obs_train, prior_strength=args.prior)
    glm_scores = np.array(
        [reco.glmix_predict(glm, it.user_id, embeddings[it.video_id]) for it in rows]
    )

    def safe_auc(scores, labs):
        try:
            return metrics.auc(scores, labs)
        except ValueError:
            return None

    cold_mask = np.array([it.video_id not in seen for it in rows])
    doc = {
        "auc_avg_sim": safe_auc(np.array(avg_s), labels),
        "auc_max_sim": safe_auc(np.array(max_s), labels),
        "auc_glmix": safe_auc(glm_scores, labels),
        "auc_glmix_coldstart": (
            safe_auc(glm_scores[cold_mask], labels[cold_mask]) if cold_mask.any() else None
        ),
    }
    out = json.dumps(doc, sort_keys=True)
    print(out)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    return 0


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "gen-cowatch": _cmd_gen_cowatch,
    "train-ubm": _cmd_train_ubm,
    "extract": _cmd_extract,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "reco-train": _cmd_reco_train,
    "reco-eval": _cmd_reco_eval,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        args = _apply_config_file(parser, argv, args)
        _print_config(args)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
