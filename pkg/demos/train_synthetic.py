"""Train the bundled synthetic configuration at fp16 and fp32 and compare."""

import logging
import sys
from importlib import resources

from halfsync.config import load_config
from halfsync.trainer import run_training

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 2
    path = resources.files("halfsync") / "configs" / "synthetic.toml"
    for preset in ("fp16", "fp32"):
        run = load_config(path, [f"precision.preset=\"{preset}\"", f"train.epochs={epochs}"])
        res = run_training(run)
        last = res.history[-1]
        print(f"{preset}: loss {last.loss:.4f}  val AUC {last.val_auc:.4f}  "
              f"wire zeros {last.wire_zero_count}  overflows {last.overflow_count}")
