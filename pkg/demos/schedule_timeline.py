"""Plan the heavy-encoder batch size and draw the first ticks of the schedule.

    python3 demos/schedule_timeline.py [tick_ms] [delta_ms]
"""

import sys

from etadrive.scheduler import CostModel, PipelineConfig, gantt, plan_schedule, simulate_schedule, sweep


def main(tick_ms: float = 50.0, delta_ms: float = 500.0) -> None:
    costs = CostModel()
    cfg = PipelineConfig(tick_ms, delta_ms)
    plan = plan_schedule(costs, cfg)
    print(f"T={tick_ms:g} ms  Delta={delta_ms:g} ms  B={plan.batch_size}  "
          f"large batch {plan.cost_large:g} ms  worst wait {plan.worst_wait:g} ms  "
          f"reactive {plan.reactive_cost:g} ms  feasible={plan.feasible}")
    for mode in ("full", "base", "no_small"):
        print(f"  reactive cost {mode:<9} {costs.reactive_cost(mode):6.1f} ms")

    trace, _ = simulate_schedule(costs, cfg, 2000)
    print(f"2000 ticks: {len(trace.of('deadline_miss'))} deadline misses")
    print(gantt(trace, tick_ms, n_ticks=20))

    print("\nfeasibility frontier")
    for row in sweep(costs):
        state = f"B={row['batch']}" if row["feasible"] else f"no ({row['binding']})"
        print(f"  T={row['tick_ms']:>4g}  Delta={row['delta_ms']:>5g}  {state}")


if __name__ == "__main__":
    main(*(float(a) for a in sys.argv[1:3]))
