"""
A whole experiment from one config
==================================

The same thing as ``mmclab run --config demos/configs/toy_blobs.json``:
train every listed loss, attack each model, fit the loss densities, and
write everything under one output directory with a manifest.
"""
import sys
import tempfile
from pathlib import Path

from mmclab.cli import main

config = Path(__file__).parent / "configs" / "toy_blobs.json"
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="mmclab_"))

code = main(["run", "--config", str(config), "--out", str(out)])
print("exit code", code)
for p in sorted(out.rglob("*")):
    if p.is_file():
        print(" ", p.relative_to(out))

# centers on their own, to stdout
main(["centers", "--cmm", "10", "--dim", "3", "--classes", "4"])
