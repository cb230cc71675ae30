#!/usr/bin/env python3
"""
Oryx T-Maze protocol, end to end.
Generates the expert and mixed datasets, trains full Oryx and the ablations,
evaluates every run over several seeds and compares each ablation against
full Oryx on the pooled returns.
"""

import logging
import os
from pathlib import Path

from models.schemas import CompareConfig, EvalConfig, GenDataConfig, TrainConfig
from main import cmd_compare, cmd_eval, cmd_gen_data, cmd_train
from services.container import canonical_json
from services.evaluation import pool_reports

ABLATIONS = ["none", "no-autoregressive", "no-memory", "no-icq"]

if __name__ == "__main__":
    workdir = Path(os.getenv("ORYX_WORKDIR", "oryx_runs"))
    seeds = [int(s) for s in os.getenv("ORYX_SEEDS", "0,1,2").split(",")]
    updates = int(os.getenv("ORYX_UPDATES", 20_000))
    eval_episodes = int(os.getenv("ORYX_EVAL_EPISODES", 320))
    logging.basicConfig(level=os.getenv("ORYX_LOG_LEVEL", "INFO").upper())

    print("🚀 Oryx T-Maze protocol")
    print(f"📁 Working directory: {workdir}")
    print(f"🎲 Seeds {seeds}, {updates} updates per run, {eval_episodes} evaluation episodes")

    datasets = {
        "expert": GenDataConfig(policy="expert", transitions=100_000, seed=seeds[0],
                                output=str(workdir / "datasets" / "expert.oryx")),
        "mixed": GenDataConfig(policy="noisy", epsilon=0.3, transitions=100_000, seed=seeds[0],
                               output=str(workdir / "datasets" / "mixed.oryx")),
    }
    for config in datasets.values():
        cmd_gen_data(config)

    for name, data in datasets.items():
        pooled = {}
        for ablation in ABLATIONS:
            reports = []
            for seed in seeds:
                run_dir = workdir / name / ablation / f"seed{seed}"
                result = cmd_train(TrainConfig(dataset=data.output, output_dir=str(run_dir), updates=updates,
                                               seed=seed, ablate=ablation))
                reports.append(cmd_eval(EvalConfig(checkpoint=str(result.checkpoint), episodes=eval_episodes,
                                                   seed=seed, output=str(run_dir / "eval_report.json"))))
            # returns of every seed form one sample per configuration
            pooled_path = workdir / name / ablation / "pooled_report.json"
            pooled_path.write_bytes(canonical_json(pool_reports(reports).model_dump(mode="json")))
            pooled[ablation] = pooled_path

        print(f"\n📊 {name} dataset: full Oryx vs ablations over seeds {seeds}")
        for ablation in ABLATIONS[1:]:
            cmd_compare(CompareConfig(report_a=str(pooled["none"]), report_b=str(pooled[ablation]),
                                      output=str(workdir / name / f"compare_{ablation}.json"), seed=seeds[0]))
