"""Train the desk-scale detector on synthetic shapes, then evaluate with decoder layers dropped.

    python demos/toy_training.py            # vanilla toy run
    python demos/toy_training.py --plus     # with pyramid fusion, mask queries and extra losses
    python demos/toy_training.py --budget 300

On one core a vanilla run takes about 25 minutes and a plus run about 80.
"""
import argparse
import time

from vidt.config import TOY_INI, TOY_PLUS_INI, parse_config
from vidt.training import evaluate, train

if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--plus", action="store_true")
    parser.add_argument("--budget", type=float, default=None, help="wall-clock seconds, including evaluation")
    args = parser.parse_args()

    cfg = parse_config(TOY_PLUS_INI if args.plus else TOY_INI)
    start = time.perf_counter()
    trainer = train(cfg, log=print, time_budget=args.budget)
    print(f"trained {trainer.state.step} steps in {time.perf_counter() - start:.0f}s")

    model = trainer.model
    model.eval()
    for n_drop in range(cfg.neck.num_layers):
        report = evaluate(model, trainer.val_set, n_drop=n_drop)
        print(f"decoder layers dropped: {n_drop}  AP@0.5 {report['ap50']:.3f}  AP {report['ap']:.3f}")
