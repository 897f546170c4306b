"""Runs a tiny search/train/eval with the CLI and validates metrics.json
against docs/metrics.schema.json."""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

try:
    import jsonschema
except ImportError:
    print("jsonschema not installed")
    sys.exit(77)

binary, schema_path = sys.argv[1], Path(sys.argv[2])
data = ["--synthetic", "--subjects", "4", "--record-length", "256", "--window", "32", "--stride", "32"]

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)

    def run(*args):
        subprocess.run([binary, "-q", *args, *data], check=True)

    run("search", "--epochs", "1", "--init-channels", "4", "--train-batch", "8", "--val-batch", "8",
        "--out", str(tmp / "s"))
    run("train", "--epochs", "1", "--batch", "8", "--genotype", str(tmp / "s" / "genotype.json"),
        "--out", str(tmp / "t"))
    run("eval", "--weights", str(tmp / "t" / "weights.ckpt"), "--out", str(tmp / "e"))

    schema = json.loads(schema_path.read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    metrics = json.loads((tmp / "e" / "metrics.json").read_text())
    jsonschema.validate(metrics, schema, cls=jsonschema.Draft202012Validator)

    # The schema must also reject what the engine never writes.
    for bad in ({**metrics, "eer": 1.5}, {k: v for k, v in metrics.items() if k != "frr_at_far"},
                {**metrics, "under_resolved": ["1e-4"]}):
        try:
            jsonschema.validate(bad, schema, cls=jsonschema.Draft202012Validator)
        except jsonschema.ValidationError:
            continue
        print("schema accepted an invalid document:", bad)
        sys.exit(1)
print("metrics.json matches docs/metrics.schema.json")
