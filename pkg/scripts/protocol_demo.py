#!/usr/bin/env python3
"""Attack a model served over the masked protocol on loopback.

Starts the inference server, runs the extraction purely through protocol
sessions, and scores the result against the served parameters.
"""

import argparse

import shiftextract as sx
from shiftextract.protocol import serve


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arch", default="conv3x3x3-mpr2-fc8-r-fc3")
    ap.add_argument("--input-shape", default="2x4x4")
    ap.add_argument("--model-seed", type=int, default=1)
    ap.add_argument("--attack-seed", type=int, default=2)
    args = ap.parse_args()

    shape = tuple(int(p) for p in args.input_shape.split("x"))
    truth = sx.random_model(args.arch, shape, seed=args.model_seed)
    server = serve(truth, seed=0)
    host, port = server.address
    print(f"serving {args.arch} on {host}:{port}")
    try:
        cfg = sx.ExperimentConfig(
            arch=args.arch,
            input_shape=shape,
            attack_seed=args.attack_seed,
            backend="endpoint",
            endpoint=f"{host}:{port}",
        )
        report, extracted = sx.run_attack(cfg, truth=truth)
    finally:
        server.stop()

    print(report.to_csv())
    print(f"{report.total_queries} protocol sessions, {report.calls_per_param:.1f} per parameter")
    verdict = sx.verify_models(extracted, truth)
    worst = max(max(r["max_bias_error"], r["max_weight_error"]) for r in verdict["layers"])
    print(f"verification: {'PASS' if verdict['pass'] else 'FAIL'} (worst error {worst:.2e})")
    return 0 if verdict["pass"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
