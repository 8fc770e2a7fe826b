#!/usr/bin/env python3
"""Runs every CLI command on a tiny dataset and validates each JSON artifact,
plus the example configs, against docs/schemas."""

import argparse
import json
import shutil
import struct
import subprocess
import sys
from pathlib import Path

from jsonschema import Draft202012Validator
from referencing import Registry, Resource


def fta_json(path, name):
    data = Path(path).read_bytes()
    if data[:4] != b"FTA1":
        raise ValueError(f"{path}: not an FTA archive")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        entry = data[off:off + nlen].decode()
        off += nlen
        dtype, rank = data[off], data[off + 1]
        off += 2
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = 1
        for d in dims:
            size *= d
        size *= 4 if dtype == 0 else 1
        if entry == name:
            return json.loads(data[off:off + size])
        off += size
    raise KeyError(f"{path}: no entry {name}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cli", required=True)
    ap.add_argument("--docs", required=True)
    ap.add_argument("--workdir", required=True)
    args = ap.parse_args()

    docs = Path(args.docs)
    schemas = {p.name: json.loads(p.read_text()) for p in (docs / "schemas").glob("*.json")}
    for s in schemas.values():
        Draft202012Validator.check_schema(s)
    registry = Registry().with_resources([(s["$id"], Resource.from_contents(s)) for s in schemas.values()])

    work = Path(args.workdir)
    shutil.rmtree(work, ignore_errors=True)
    work.mkdir(parents=True)
    ex = docs / "examples"

    def run(*argv):
        r = subprocess.run([args.cli, *map(str, argv)], capture_output=True, text=True)
        if r.returncode != 0:
            sys.exit(f"command failed ({r.returncode}): {' '.join(map(str, argv))}\n{r.stdout}{r.stderr}")

    run("gen-data", "--config", ex / "dataset-small.json", "--out", work / "ds")
    run("train", "--config", ex / "train-tiny.json", "--data", work / "ds", "--out", work / "ckpt.fta")
    run("build-codebook", "--ckpt", work / "ckpt.fta", "--mode", "conditioned", "--object", "crate",
        "--rotations", ex / "rotations-level2.json", "--out", work / "cb.fta")
    run("build-codebook", "--ckpt", work / "ckpt.fta", "--mode", "rendered", "--object", "crate",
        "--data", work / "ds", "--level", "1", "--inplane", "4", "--out", work / "cbr.fta")
    run("inspect", "--data", work / "ds", "--export-sample", "5", "--out", work / "sample.fta")
    run("estimate", "--ckpt", work / "ckpt.fta", "--codebook", work / "cbr.fta", "--input", work / "sample.fta",
        "--out", work / "pose.json")
    run("estimate", "--ckpt", work / "ckpt.fta", "--codebook", work / "cb.fta", "--input", work / "sample.fta",
        "--depth", "--out", work / "pose_depth.json")
    (work / "eval.json").write_text(json.dumps({"format": "poselatent-eval-config/1", "level": 1, "n_inplane": 4}))
    run("evaluate", "--ckpt", work / "ckpt.fta", "--data", work / "ds", "--config", work / "eval.json",
        "--report", work / "report.json")
    run("ablate", "--config", ex / "train-tiny.json", "--data", work / "ds", "--out", work / "ablate",
        "--eval-config", work / "eval.json", "--variants", "bilinear", "mlp_nocond")

    cases = [
        ("dataset-config.schema.json", ex / "dataset-desk.json"),
        ("dataset-config.schema.json", ex / "dataset-small.json"),
        ("train-config.schema.json", ex / "train-desk.json"),
        ("train-config.schema.json", ex / "train-tiny.json"),
        ("eval-config.schema.json", ex / "eval-default.json"),
        ("rotation-source.schema.json", ex / "rotations-level2.json"),
        ("dataset-manifest.schema.json", work / "ds" / "manifest.json"),
        ("checkpoint-meta.schema.json", (work / "ckpt.fta", "meta.json")),
        ("codebook-meta.schema.json", (work / "cb.fta", "meta.json")),
        ("codebook-meta.schema.json", (work / "cbr.fta", "meta.json")),
        ("sample.schema.json", (work / "sample.fta", "meta.json")),
        ("pose.schema.json", work / "pose.json"),
        ("pose.schema.json", work / "pose_depth.json"),
        ("report.schema.json", work / "report.json"),
        ("report.schema.json", work / "ablate" / "bilinear.report.json"),
        ("ablation.schema.json", work / "ablate" / "ablation.json"),
    ]
    bad = 0
    for schema, source in cases:
        doc = fta_json(*source) if isinstance(source, tuple) else json.loads(Path(source).read_text())
        label = f"{source[0]}:{source[1]}" if isinstance(source, tuple) else str(source)
        errors = list(Draft202012Validator(schemas[schema], registry=registry).iter_errors(doc))
        for e in errors[:5]:
            print(f"{label}: {schema}: {e.message} at /{'/'.join(map(str, e.path))}")
        bad += bool(errors)
        if not errors:
            print(f"ok {label} ({schema})")
    if bad:
        sys.exit(f"{bad} artifact(s) do not match their schema")


if __name__ == "__main__":
    main()
