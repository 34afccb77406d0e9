"""Command-line interface.

Subcommands: phantom gen, train seg|unmix|e2e, serve, segment,
eval dice|msssim|icc|reid, attack bss, run. Each one is a thin wrapper over
the library; reports use the key=value format throughout.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import experiments, tensorio
from .backends import CnnBackend, GroundTruthAccess, NoisyOracleBackend, OracleBackend
from .errors import ConfigError, MixsegError
from .metrics import MetricReport, dice_report, icc_test_retest, ms_ssim, reid_retrieval, write_csv
from .mixing import build_mix_key
from .nets import Sequential, tiny_cnn, unmix_net
from .phantom import ScanConfig, generate_dataset, load_dataset, save_dataset
from .protocol import client_segment_volume, serve
from .training import mixture_sampler, quad_sampler, train_end_to_end, train_segmenter, train_unmixer
from .volume import Volume


def _parse_dims(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise ConfigError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


# ---------------------------------------------------------------------------
# Checkpoint helpers: one container holds both networks under name prefixes.


def save_pipeline_checkpoint(path, segmenter: Sequential | None = None,
                             unmixer: Sequential | None = None) -> None:
    tensors = {}
    if segmenter is not None:
        tensors.update({f"seg.{k}": v for k, v in segmenter.params().items()})
    if unmixer is not None:
        tensors.update({f"unmix.{k}": v for k, v in unmixer.params().items()})
    if not tensors:
        raise ConfigError("nothing to checkpoint")
    tensorio.save_checkpoint(path, tensors)


def _split_prefix(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_segmenter(path) -> Sequential:
    tensors = tensorio.load_checkpoint(path)
    params = _split_prefix(tensors, "seg.") or tensors
    if "conv1.w" not in params:
        raise ConfigError(f"{path} holds no segmenter parameters")
    width, in_channels = params["conv1.w"].shape[:2]
    num_classes = params["conv3.w"].shape[0]
    net = tiny_cnn(num_classes, in_channels=in_channels, width=width)
    net.set_params(params)
    return net


def load_unmixer(path) -> Sequential:
    tensors = tensorio.load_checkpoint(path)
    params = _split_prefix(tensors, "unmix.")
    if "unmix1.w" not in params:
        raise ConfigError(f"{path} holds no unmixer parameters")
    width, c_in = params["unmix1.w"].shape[:2]
    num_classes = params["unmix2.w"].shape[0]
    if c_in != 2 * num_classes + 1:
        raise ConfigError(f"unmixer in {path} has inconsistent channel counts")
    net = unmix_net(num_classes, width=width)
    net.set_params(params)
    return net


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_phantom_gen(args) -> int:
    cfg = ScanConfig(dims=tuple(args.dims), noise_std=args.noise_std)
    dataset = generate_dataset(args.subjects, args.scans_per_subject, seed=args.seed, cfg=cfg)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} scans to {args.out}")
    return 0


def _training_inputs(args):
    cfg = experiments.parse_config(args.config) if args.config else experiments.ExperimentConfig()
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    if args.data:
        dataset = load_dataset(args.data)
        from .volume import PatchGrid, extract_label_patches, extract_patches

        grid = PatchGrid.cover(dataset[0][0].dims, cfg.patch)
        pairs = []
        for vol, labels in dataset:
            xs = extract_patches(vol, grid)
            ys = extract_label_patches(labels, grid)
            pairs.extend((x.data, y.data) for x, y in zip(xs, ys))
        num_classes = dataset[0][1].num_classes
    else:
        data = experiments.prepare_data(cfg)
        pairs = data.train_pairs
        num_classes = data.train_scans[0][1].num_classes
    return cfg, pairs, num_classes


def _cmd_train(args) -> int:
    cfg, pairs, num_classes = _training_inputs(args)
    tc = cfg.train_config(f"train-{args.stage}")
    if args.stage == "seg":
        net = tiny_cnn(num_classes, seed=experiments._derived_seed(cfg.seed, "init-seg"))
        history = train_segmenter(net, mixture_sampler(pairs, pairs, cfg.alpha_bounds), tc)
        save_pipeline_checkpoint(args.out, segmenter=net)
    elif args.stage == "unmix":
        if not args.seg_ckpt:
            raise ConfigError("train unmix needs --seg-ckpt with a frozen segmenter")
        segmenter = load_segmenter(args.seg_ckpt)
        unmixer = unmix_net(num_classes, seed=experiments._derived_seed(cfg.seed, "init-unmix"))
        history = train_unmixer(segmenter, unmixer, quad_sampler(pairs, pairs), tc)
        save_pipeline_checkpoint(args.out, unmixer=unmixer)
    else:
        segmenter = tiny_cnn(num_classes, seed=experiments._derived_seed(cfg.seed, "init-seg"))
        unmixer = unmix_net(num_classes, seed=experiments._derived_seed(cfg.seed, "init-unmix"))
        history = train_end_to_end(segmenter, unmixer, quad_sampler(pairs, pairs), tc).total
        save_pipeline_checkpoint(args.out, segmenter=segmenter, unmixer=unmixer)
    print(f"final loss {history[-1]:.6f} after {len(history)} iterations; saved {args.out}")
    return 0


def _cmd_serve(args) -> int:
    if args.backend == "cnn":
        if not args.ckpt:
            raise ConfigError("cnn backend needs --ckpt")
        backend = CnnBackend(load_segmenter(args.ckpt))
    else:
        if not args.truth:
            raise ConfigError("oracle backends need --truth (a ground-truth bundle)")
        access = GroundTruthAccess.load(args.truth, allow_ground_truth=True)
        if args.backend == "oracle":
            backend = OracleBackend(access)
        else:
            backend = NoisyOracleBackend(access, noise_std=args.noise_std, seed=args.seed)
    server = serve(backend, _parse_addr(args.listen), training=args.training)
    host, port = server.addr
    print(f"listening on {host}:{port}", flush=True)
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def _cmd_segment(args) -> int:
    vol = Volume(tensorio.read_tensor(args.infile).astype(np.float64))
    pool = load_dataset(args.refs)
    key = build_mix_key(
        [(v, l) for v, l in pool], tuple(args.patch), k=args.tta,
        rng_seed=args.key_seed, alpha=args.alpha,
        alpha_bounds=(min(args.alpha, 0.2), max(args.alpha, 0.8)),
    )
    unmixer = load_unmixer(args.unmix_ckpt) if args.decoder == "learned" else None
    result = client_segment_volume(
        vol, key, _parse_addr(args.server), decoder=args.decoder, unmixer=unmixer,
    )
    tensorio.write_tensor(args.out, result.data)
    print(f"wrote segmentation {result.data.shape} to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    report = MetricReport()
    csv_rows, csv_header = None, None
    if args.measure == "dice":
        pred = tensorio.read_tensor(args.pred)
        gt = tensorio.read_tensor(args.gt)
        rep = dice_report(pred.astype(np.float64), gt.astype(np.float64))
        for c, v in enumerate(rep.per_class):
            report.set(f"dice.class{c}", v)
        report.set("dice.macro", rep.macro)
        csv_header = ["class", "dice"]
        csv_rows = [[c, v] for c, v in enumerate(rep.per_class)]
    elif args.measure == "msssim":
        a = tensorio.read_tensor(args.a).astype(np.float64)
        b = tensorio.read_tensor(args.b).astype(np.float64)
        report.set("msssim", ms_ssim(a, b))
    elif args.measure == "icc":
        run_a = [float(line) for line in open(args.a) if line.strip()]
        run_b = [float(line) for line in open(args.b) if line.strip()]
        icc = icc_test_retest(run_a, run_b)
        report.set("icc.estimate", icc.estimate)
        report.set("icc.lower", icc.lower)
        report.set("icc.upper", icc.upper)
    elif args.measure == "reid":
        dataset = load_dataset(args.indir)
        scans = [(vol, vol.subject_id) for vol, _ in dataset]
        rep = reid_retrieval(scans)
        report.set("reid.f1", rep.f1_score)
        report.set("reid.map", rep.mean_ap)
        report.set("reid.queries", rep.num_queries)
        csv_header = ["query", "predicted", "actual", "similarity"]
        csv_rows = [list(row) for row in rep.table]
    report.write(args.report)
    if args.csv and csv_rows is not None:
        write_csv(args.csv, csv_header, csv_rows)
    print(f"wrote {args.report}")
    return 0


def _cmd_attack(args) -> int:
    from . import attacks as attacks_mod

    dataset = load_dataset(args.indir)
    refs = generate_dataset(4, 1, seed=args.seed + 1,
                            cfg=ScanConfig(dims=dataset[0][0].dims))
    library = [v.data for v, _ in generate_dataset(args.library_size, 1, seed=args.seed + 2,
                                                   cfg=ScanConfig(dims=dataset[0][0].dims))]
    report = MetricReport()
    scores = []
    rows = []
    for i, (vol, _) in enumerate(dataset[: args.samples]):
        ref = refs[i % len(refs)][0]
        x_mix = args.alpha * vol.data + (1 - args.alpha) * ref.data
        if args.attack == "tv":
            res = attacks_mod.tv_separation_attack(
                x_mix, alpha_known=args.alpha, iterations=args.iterations,
                seed=args.seed + i, x_target_true=vol.data,
            )
        else:
            res = attacks_mod.dictionary_attack(x_mix, args.alpha, library,
                                                x_target_true=vol.data)
        scores.append(res.target_score)
        rows.append([i, f"{res.target_score:.6f}"])
    report.set("attack.kind", args.attack)
    report.set("attack.alpha", args.alpha)
    report.set("attack.samples", len(scores))
    report.set("attack.mean_msssim", float(np.mean(scores)))
    report.set("attack.std_msssim", float(np.std(scores)))
    report.write(args.report)
    print(f"wrote {args.report}")
    return 0


def _cmd_run(args) -> int:
    cfg = experiments.parse_config(args.config) if args.config else experiments.ExperimentConfig()
    result = experiments.run_all(cfg, args.out)
    print(f"experiment artifacts in {result['out_dir']} (manifest {result['manifest']})")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixseg",
                                     description="privacy-preserving mixed-patch segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic labeled volumes")
    phantom_sub = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_sub.add_parser("gen", help="generate a labeled phantom dataset")
    gen.add_argument("--subjects", type=int, required=True)
    gen.add_argument("--scans-per-subject", type=int, default=2)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--dims", type=_parse_dims, default=(48, 48, 48))
    gen.add_argument("--noise-std", type=float, default=0.02)
    gen.set_defaults(func=_cmd_phantom_gen)

    train = sub.add_parser("train", help="train networks")
    train_sub = train.add_subparsers(dest="stage", required=True)
    for stage in ("seg", "unmix", "e2e"):
        tp = train_sub.add_parser(stage)
        tp.add_argument("--config", default=None)
        tp.add_argument("--seed", type=int, default=None)
        tp.add_argument("--out", required=True)
        tp.add_argument("--data", default=None, help="phantom dataset directory")
        if stage == "unmix":
            tp.add_argument("--seg-ckpt", default=None)
        tp.set_defaults(func=_cmd_train, stage=stage)

    srv = sub.add_parser("serve", help="run a segmentation service")
    srv.add_argument("--backend", choices=("oracle", "noisy", "cnn"), required=True)
    srv.add_argument("--ckpt", default=None)
    srv.add_argument("--truth", default=None, help="ground-truth bundle for oracle backends")
    srv.add_argument("--noise-std", type=float, default=0.5)
    srv.add_argument("--seed", type=int, default=0)
    srv.add_argument("--listen", default="127.0.0.1:0")
    srv.add_argument("--training", action="store_true")
    srv.set_defaults(func=_cmd_serve)

    seg = sub.add_parser("segment", help="segment a volume through a server")
    seg.add_argument("--in", dest="infile", required=True)
    seg.add_argument("--key-seed", dest="key_seed", type=int, required=True)
    seg.add_argument("--alpha", type=float, required=True)
    seg.add_argument("--tta", type=int, default=1)
    seg.add_argument("--decoder", choices=("naive", "learned"), default="naive")
    seg.add_argument("--server", required=True)
    seg.add_argument("--out", required=True)
    seg.add_argument("--refs", required=True, help="private reference dataset directory")
    seg.add_argument("--patch", type=_parse_dims, default=(16, 16, 16))
    seg.add_argument("--unmix-ckpt", default=None)
    seg.set_defaults(func=_cmd_segment)

    ev = sub.add_parser("eval", help="compute metrics")
    ev_sub = ev.add_subparsers(dest="measure", required=True)
    d = ev_sub.add_parser("dice")
    d.add_argument("--pred", required=True)
    d.add_argument("--gt", required=True)
    m = ev_sub.add_parser("msssim")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    i = ev_sub.add_parser("icc")
    i.add_argument("--a", required=True, help="text file, one Dice per line")
    i.add_argument("--b", required=True)
    r = ev_sub.add_parser("reid")
    r.add_argument("--in", dest="indir", required=True)
    for p in (d, m, i, r):
        p.add_argument("--report", required=True)
        p.add_argument("--csv", default=None)
        p.set_defaults(func=_cmd_eval)

    atk = sub.add_parser("attack", help="adversary harness")
    atk_sub = atk.add_subparsers(dest="attack_command", required=True)
    bss = atk_sub.add_parser("bss", help="source-separation attack on mixtures")
    bss.add_argument("--alpha", type=float, required=True)
    bss.add_argument("--attack", choices=("tv", "dict"), required=True)
    bss.add_argument("--in", dest="indir", required=True)
    bss.add_argument("--report", required=True)
    bss.add_argument("--samples", type=int, default=3)
    bss.add_argument("--iterations", type=int, default=150)
    bss.add_argument("--library-size", type=int, default=12)
    bss.add_argument("--seed", type=int, default=0)
    bss.set_defaults(func=_cmd_attack,
                     attack_normalized=None)

    run = sub.add_parser("run", help="full experiment from one config")
    run.add_argument("--config", default=None)
    run.add_argument("--out", required=True)
    run.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "attack_command", None) == "bss" and args.attack == "dict":
        args.attack = "dictionary"
    try:
        return args.func(args)
    except MixsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
