"""Command line client for the run operations.

The CLI only builds request models and renders responses. Without
``--server`` it calls the service handlers in process; with it, the same
requests go over HTTP to a running instance (see ``metaconf serve``).

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(including a failing gradient check). ``METACONF_OUT_ROOT`` prefixes
relative output paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import service
from .errors import ConfigError, NumericalError

OUT_ROOT_ENV = "METACONF_OUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _resolve_out(path: str | None) -> str | None:
    if path is None:
        return None
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not Path(path).is_absolute():
        return str(Path(root) / path)
    return path


class RemoteError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _dispatch(server: str | None, route: str, handler, request):
    """In-process call by default; HTTP when a server is given."""
    if server is None:
        return handler(request)
    import httpx

    resp = httpx.post(
        server.rstrip("/") + route, json=request.model_dump(), timeout=3600.0
    )
    if resp.status_code >= 400:
        detail = {}
        try:
            detail = resp.json().get("detail", {})
        except ValueError:
            pass
        if isinstance(detail, dict) and "kind" in detail:
            raise RemoteError(detail["kind"], detail.get("message", resp.text))
        raise RemoteError("config", resp.text)
    return resp.json()


def _field(result, name):
    if isinstance(result, dict):
        return result.get(name)
    return getattr(result, name)


def _parse_int_list(raw: str) -> list[int]:
    return [int(part) for part in raw.split(",") if part.strip()]


def _parse_str_list(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def cmd_datagen(args) -> int:
    req = service.DatagenRequest(
        config_path=args.config, out_path=_resolve_out(args.out)
    )
    result = _dispatch(args.server, "/datagen", service.handle_datagen, req)
    print(f"wrote training data to {_field(result, 'train_path')}")
    print(f"wrote testing data to {_field(result, 'test_path')}")
    for split in ("train_summary", "test_summary"):
        s = _field(result, split)
        print(
            f"{split.split('_')[0]}: {s['n_samples']} samples, "
            f"correct rate {s['positive_rate']:.4f}"
        )
    meta = _field(result, "metadata")
    print(f"noise scale {meta['noise_scale']:.6g}, held-out cluster {meta['held_out_cluster']}")
    return EXIT_OK


def cmd_train(args) -> int:
    req = service.TrainRequest(
        config_path=args.config, data_path=args.data, out_dir=_resolve_out(args.out)
    )
    result = _dispatch(args.server, "/train", service.handle_train, req)
    print(f"checkpoint: {_field(result, 'checkpoint_path')}")
    print(f"history:    {_field(result, 'history_path')}")
    print(f"report:     {_field(result, 'report_path')}")
    for name, value in _field(result, "metrics").items():
        print(f"  {name}: {value if value is not None else 'undefined'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    req = service.EvalRequest(
        checkpoint_path=args.checkpoint,
        data_path=args.data,
        mode=args.mode,
        out_path=_resolve_out(args.out),
    )
    result = _dispatch(args.server, "/eval", service.handle_eval, req)
    report = _field(result, "report")
    if _field(result, "report_path"):
        print(f"report: {_field(result, 'report_path')}")
    for name, value in report["metrics"].items():
        print(f"  {name}: {value if value is not None else 'undefined'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    req = service.CompareRequest(
        config_path=args.config,
        data_path=args.data,
        test_data_path=args.test_data,
        seeds=_parse_int_list(args.seeds),
        variants=_parse_str_list(args.variants),
        out_dir=_resolve_out(args.out),
    )
    result = _dispatch(args.server, "/compare", service.handle_compare, req)
    print(f"table:  {_field(result, 'table_path')}")
    print(f"report: {_field(result, 'report_path')}")
    table = _field(result, "table")
    for variant, row in table.items():
        cells = []
        for name, agg in row.items():
            if agg["mean"] is None:
                cells.append(f"{name}=n/a")
            else:
                cells.append(f"{name}={agg['mean']:.4f}±{agg['std']:.4f}")
        print(f"  {variant}: " + "  ".join(cells))
    win = _field(result, "win_rate_full_vs_joint")
    if win:
        summary = ", ".join(
            f"{name} {w['wins']}/{w['of']}" for name, w in win.items() if w["of"]
        )
        print(f"full beats joint: {summary}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    req = service.GradcheckRequest(config_path=args.config, mode=args.mode)
    result = _dispatch(args.server, "/gradcheck", service.handle_gradcheck, req)
    max_err = _field(result, "max_rel_error")
    threshold = _field(result, "threshold")
    passed = _field(result, "passed")
    print(f"mode {_field(result, 'mode')}: {_field(result, 'n_cases')} cases")
    print(f"max relative error {max_err:.3e} (threshold {threshold:.0e})")
    n_above = _field(result, "n_above_1e_3")
    if n_above is not None:
        print(f"cases with error above 1e-3: {n_above}")
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_NUMERICAL


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("metaconf.service:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaconf",
        description="confidence estimator training, evaluation and comparison",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_server(p):
        p.add_argument("--server", default=None, help="base URL of a running service")

    p = sub.add_parser("datagen", help="generate a synthetic benchmark")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="path for the training data file")
    add_server(p)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train a confidence estimator")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    add_server(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="regression", choices=["regression", "classification"])
    p.add_argument("--out", default=None, help="optional report path")
    add_server(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="train and evaluate variants over seeds")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", default=None)
    p.add_argument("--seeds", required=True, help="comma separated, e.g. 0,1,2")
    p.add_argument("--variants", required=True, help="comma separated variant names")
    p.add_argument("--out", required=True, help="output directory")
    add_server(p)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of the update rule")
    p.add_argument("--config", default=None)
    p.add_argument("--mode", default="suite", choices=["suite", "first_order", "quadratic"])
    add_server(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RemoteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if exc.kind == "numerical" else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
