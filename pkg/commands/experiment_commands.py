from controllers.experiment_controller import (
    cmd_bench,
    cmd_demo_constraint,
    cmd_evaluate,
    cmd_sweep_h,
    cmd_train,
)


def _add_common_flags(parser):
    parser.add_argument("--config", default=None, help="flat JSON config file (default: config.json in the working directory)")
    parser.add_argument("--target", default=None, help="registered target id, e.g. corr-gauss or bench-a")
    parser.add_argument("--T", dest="T", default=None, help="number of HMC transitions")
    parser.add_argument("--leapfrog-steps", dest="leapfrog_steps", default=None)
    parser.add_argument("--iters", dest="iterations", default=None, help="Adam iterations")
    parser.add_argument("--batch", default=None, help="Monte Carlo chains per iteration")
    parser.add_argument("--h", default=None, help='entropy floor in nats or "auto"')
    parser.add_argument("--seed", default=None)
    parser.add_argument("--stop-gradient", dest="stop_gradient", default=None, help="true/false")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", default=None, help="worker cap for chain simulation")


def register_experiment_commands(subparsers):
    train_parser = subparsers.add_parser("train", help="train chain parameters and write the report")
    _add_common_flags(train_parser)
    train_parser.set_defaults(handler=lambda config, args: cmd_train(config))

    evaluate_parser = subparsers.add_parser("evaluate", help="convergence, MMD and histograms for trained parameters")
    _add_common_flags(evaluate_parser)
    evaluate_parser.add_argument("--params", default=None, help="trained parameter file (default <out>/params.json)")
    evaluate_parser.set_defaults(handler=lambda config, args: cmd_evaluate(config, args.params))

    bench_parser = subparsers.add_parser("bench", help="benchmark table over the registered targets")
    _add_common_flags(bench_parser)
    bench_parser.set_defaults(handler=lambda config, args: cmd_bench(config))

    demo_parser = subparsers.add_parser("demo-constraint", help="valid vs low-entropy P0 on corr-gauss")
    _add_common_flags(demo_parser)
    demo_parser.set_defaults(handler=lambda config, args: cmd_demo_constraint(config))

    sweep_parser = subparsers.add_parser("sweep-h", help="train corr-gauss for several entropy floors")
    _add_common_flags(sweep_parser)
    sweep_parser.set_defaults(handler=lambda config, args: cmd_sweep_h(config))


OVERRIDE_KEYS = ("target", "T", "leapfrog_steps", "iterations", "batch", "h", "seed", "stop_gradient", "out", "threads")


def overrides_from_args(args):
    return {key: getattr(args, key, None) for key in OVERRIDE_KEYS}
