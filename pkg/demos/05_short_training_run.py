# A short end-to-end run on a small corpus: auto-encoder, a few hundred
# batches of BC + DAgger with the world model, then held-out metrics.
# Takes about a minute; the defaults used for the real runs are much longer.
import dataclasses

from unemo.cli import pretrain_ae
from unemo.config import RunConfig, TrainConfig
from unemo.graphworld import build_split
from unemo.training import Agent, build_params, evaluate, train

cfg = RunConfig(train_worlds=40, val_worlds=10, episodes_per_world=8, ae_epochs=10,
                train=TrainConfig(phases=2, batches_per_phase=200))
train_data = build_split(cfg.world, "train", cfg.train_worlds, cfg.episodes_per_world)
val_data = build_split(cfg.world, "val", cfg.val_worlds, cfg.episodes_per_world)

ae, log = pretrain_ae(cfg, train_data)
print("auto-encoder held-out ratio %.4f" % log.heldout_ratio)

agent = Agent(cfg.model, build_params(cfg.model, 0), ae)
before = evaluate(agent, val_data, cfg.train).report
res = train(agent, train_data, cfg.train, val_data=val_data,
            on_batch=lambda r: print("phase %d batch %3d total %.3f" % (r["phase"], r["batch"], r["total"]))
            if r["batch"] % 50 == 0 else None)
after = evaluate(agent, val_data, cfg.train)
print("SR before %.3f  after %.3f" % (before.sr, after.report.sr))
print({k: round(v, 3) for k, v in after.report.aggregate().items()})
print("world model cos %.3f  mse %.4f" % (after.predictions.mean_cosine, after.predictions.mean_mse))

# same thing without feedback, for comparison
plain = Agent(cfg.model, build_params(cfg.model, 0), ae)
train(plain, train_data, dataclasses.replace(cfg.train, feedback=False))
print("feedback off SR %.3f" % evaluate(plain, val_data, cfg.train).report.sr)
