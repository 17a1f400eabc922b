"""Train a full and a no_small model on hard_brake episodes and compare them.

The no_small model only ever sees frames that are Delta old, so when the
lead vehicle brakes inside the last Delta window it drives on as if nothing
happened. Takes about 10 minutes on one core.

    python3 demos/hard_brake_ablation.py [steps]
"""

import sys

from etadrive.harness import TrainConfig, collect_dataset, eval_pipeline_config, train
from etadrive.scheduler import CostModel, run_pipeline
from etadrive.toyworld import make_scenario


def main(steps: int = 800) -> None:
    data = collect_dataset([make_scenario("hard_brake", s) for s in range(10, 30)])
    print(f"{len(data)} training samples")
    cfg = TrainConfig(epochs=steps // 25, steps_per_epoch=25, lr=3e-3)
    for mode in ("full", "no_small"):
        result = train(data, mode, cfg)
        print(f"{mode}: loss {result.totals[0]:.3f} -> {result.totals[-25:].mean():.4f} "
              f"in {result.seconds:.0f}s")
        for seed in range(5):
            ep = make_scenario("hard_brake", seed)
            run = run_pipeline(ep, result.model, CostModel(), eval_pipeline_config())
            final = run.rollout.final
            outcome = "collision" if final.collision else ("ok" if run.rollout.success else "timeout")
            print(f"  {ep.episode_id:<14} brake at {ep.param('t_brake'):.1f}s  {outcome}")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:2]))
