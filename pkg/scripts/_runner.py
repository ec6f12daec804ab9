"""Shared command line for the trend experiment scripts."""

import argparse
import dataclasses
import json
import time


def run(description, fn, exp_cls, default_seeds, summarize):
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(default_seeds))
    parser.add_argument("--set", nargs="*", default=[], metavar="FIELD=VALUE",
                        help="override experiment fields, values parsed as JSON")
    parser.add_argument("--json", help="also write the per-seed results here")
    args = parser.parse_args()
    fields = {f.name for f in dataclasses.fields(exp_cls)}
    overrides = {}
    for item in args.set:
        key, _, value = item.partition("=")
        if key not in fields:
            parser.error(f"unknown field {key!r}; choose from {sorted(fields)}")
        overrides[key] = json.loads(value)
    exp = exp_cls(**overrides)
    print(json.dumps(dataclasses.asdict(exp)))
    t0 = time.perf_counter()
    results = []
    for seed in args.seeds:
        r = fn(seed, exp)
        results.append(r)
        print(f"seed {seed}: {json.dumps(r, default=str)}", flush=True)
    print(summarize(results))
    print(f"{time.perf_counter() - t0:.1f}s")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"experiment": dataclasses.asdict(exp), "seeds": args.seeds, "results": results},
                      f, indent=2, default=str)
