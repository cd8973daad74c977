"""
Garment3D: Entry Point
Runs pipeline stages from a JSON config and hosts the embedding service.

Usage:
    python app.py pipeline --config run.json          # all stages
    python app.py deform --config run.json            # align + deform only
    python app.py pipeline --config run.json --stage texture
    python app.py serve --backend clip --port 5001    # embedding service
    python app.py make-test-body --out body.g3db
    python app.py make-demo --out demo/               # synthetic inputs + run.json

Exit codes: 0 ok, 2 invalid input, 3 runtime failure, 4 provider failure.
"""

import argparse
import logging
import sys

STAGE_COMMANDS = ("deform", "evaluate", "texture", "fit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Garment deformation, body fitting and texturing pipeline"
    )
    parser.add_argument(
        "--verbose", "-v", action="store_true",
        help="Debug logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p):
        p.add_argument("--config", "-c", required=True, help="Pipeline JSON config")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        p.add_argument("--provider", choices=["stub", "remote"], default=None,
                       help="Embedding provider (default: from config)")
        p.add_argument("--endpoint", default=None, help="Remote embedding service URL")

    p = sub.add_parser("pipeline", help="Run every stage, reusing unchanged ones")
    run_options(p)
    p.add_argument("--stage", default=None,
                   help="Run only this stage and the stages it depends on "
                        "(align, deform, evaluate, texture, fit)")

    for name in STAGE_COMMANDS:
        run_options(sub.add_parser(name, help=f"Run the {name} stage and what it depends on"))

    p = sub.add_parser("serve", help="Start the embedding service")
    p.add_argument("--backend", choices=["stub", "clip"], default=None,
                   help="Embedding backend (default: stub)")
    p.add_argument("--host", default=None, help="Bind address (default: 127.0.0.1)")
    p.add_argument("--port", type=int, default=None, help="Port (default: 5001)")

    p = sub.add_parser("make-test-body", help="Write the two-bone test body")
    p.add_argument("--out", required=True, help="Output body file (.g3db)")
    p.add_argument("--obj", default=None, help="Also write the rest-pose mesh as OBJ")

    p = sub.add_parser("make-demo", help="Write synthetic demo inputs and run.json")
    p.add_argument("--out", required=True, help="Output directory")
    return parser


def cmd_run(args) -> None:
    from core.pipeline import load_pipeline_config, run_pipeline

    config = load_pipeline_config(args.config, seed=args.seed, provider=args.provider, endpoint=args.endpoint)
    stage = args.command if args.command in STAGE_COMMANDS else getattr(args, "stage", None)
    result = run_pipeline(config, stage=stage)

    print(f"\nOutput: {config.output_dir}")
    for name, rec in result.records.items():
        note = f" ({rec.error})" if rec.status == "skipped" else f" {rec.wall_time:.1f}s"
        print(f"  {name:<9} {rec.status}{note}")
        for path in rec.outputs:
            print(f"            {path}")


def cmd_serve(args) -> None:
    from config import SERVICE_BACKEND, SERVICE_HOST, SERVICE_PORT
    from core.embeddings import get_embedding_provider
    from service.server import create_app

    backend = args.backend or SERVICE_BACKEND
    host = args.host or SERVICE_HOST
    port = args.port or SERVICE_PORT
    app = create_app(get_embedding_provider(backend))
    print(f"\nStarting embedding service ({backend}) at http://{host}:{port}")
    print("   Press Ctrl+C to stop.\n")
    app.run(host=host, port=port, debug=False)


def cmd_make_test_body(args) -> None:
    from core.body import make_test_body, save_body
    from core.mesh import save_obj

    body = make_test_body()
    save_body(body, args.out)
    print(f"Wrote {args.out} ({body.vertex_count} vertices, {body.joint_count} joints, "
          f"{body.shape_count} blendshapes)")
    if args.obj:
        save_obj(body.template_mesh(), args.obj)
        print(f"Wrote {args.obj}")


def cmd_make_demo(args) -> None:
    from core.demo import make_demo

    paths = make_demo(args.out)
    print(f"Demo inputs written; run:\n  python app.py pipeline --config {paths['config']}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    from core.errors import exit_code_for

    commands = {
        "pipeline": cmd_run,
        "serve": cmd_serve,
        "make-test-body": cmd_make_test_body,
        "make-demo": cmd_make_demo,
        **{name: cmd_run for name in STAGE_COMMANDS},
    }
    try:
        commands[args.command](args)
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        return 130
    except Exception as e:
        logging.getLogger("garment3d").error("%s", e, exc_info=args.verbose)
        return exit_code_for(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
