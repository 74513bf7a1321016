"""Helpers shared by several test modules."""

import fuzzpart.orchestrator as orch
from fuzzpart.orchestrator import run_campaign
from fuzzpart.simharness import SimBackend, SimConfig, campaign_config, generate_program

# (criterion number, title, passed, detail) lines printed in the terminal summary
ACCEPTANCE_RESULTS = []


def sim_three_cycles(tmp_path, monkeypatch, tag):
    program = generate_program(60, 2.5, 4)
    cfg = SimConfig(k=3, ticks=2000, interval_ticks=500, warmup_ticks=500, rng_seed=7, sample_every=250)
    backend = SimBackend(program, cfg.rng_seed, cfg.sample_every)
    snapshots = []
    real = orch.update_graph

    def spy(state, be, new_seeds, epsilon=orch.EPSILON):
        before = (set(state.done_queue), state.graph.structure())
        g = real(state, be, new_seeds, epsilon)
        snapshots.append({
            "done_before": before[0],
            "new": [s.id for s in new_seeds],
            "graph_before": before[1],
            "graph_after": g.structure(),
            "names": set(g.names),
            "orphans": {g.name(v) for v in state.orphans},
        })
        return g

    monkeypatch.setattr(orch, "update_graph", spy)
    out = tmp_path / tag
    report = run_campaign(campaign_config(program, cfg, "partitioned", out), backend, backend.initial_corpus())
    return report, backend, snapshots, out
