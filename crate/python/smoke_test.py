"""Smoke test for the Python bindings: a tiny model-free run end to end."""

import math
import tempfile

import sensorlab

TINY = """
world.image_size = 8
world.precrop_size = 10
world.episode_length = 20
world.action_repeat = 2
train.batch = 3
train.length = 4
model.deter = 12
model.stoch = 4
model.hidden = 12
model.conv = 4,4
model.deconv = 4,4
model.vector_hidden = 12
model.score_dim = 6
model.score_hidden = 12
sac.hidden = 16,16
run.seed_episodes = 2
run.total_env_steps = 120
run.eval_interval = 60
run.eval_rollouts = 2
"""


def main():
    assert sensorlab.iqm([1.0, 2.0, 3.0, 4.0]) == 2.5
    assert abs(sensorlab.kl_diag([0.0], [2.0], [0.0], [1.0]) - 0.806853) < 1e-6
    assert abs(sensorlab.lambda_returns([1.0, 1.0], [0.0, 0.5, 0.5], 0.99, 1.0)[0] - 2.48005) < 1e-9
    assert abs(sensorlab.infonce([[1.0] * 4] * 4)) < 1e-12

    env = sensorlab.Reacher("occlusion", image_size=16)
    obs = env.reset(0)
    h, w, c = env.image_shape
    assert len(obs["image"]) == h * w * c
    assert len(obs["proprio"]) > 0
    _, reward, done = env.step([0.5, -0.5])
    assert 0.0 <= reward <= 1.0 and not done

    config = sensorlab.TrainConfig.parse(TINY)
    config.set("model.modalities", "image:cpc,proprio:recon")
    try:
        config.set("train.batch", "many")
    except ValueError:
        pass
    else:
        raise AssertionError("bad value accepted")

    trainer = sensorlab.Trainer(config)
    digest = trainer.model_digest()
    trainer.run()
    assert trainer.env_steps == 120
    checks, violations = trainer.separation()
    assert checks > 0 and violations == 0
    assert trainer.model_digest() != digest
    returns = trainer.evaluate()
    assert len(returns) == 2 and all(math.isfinite(r) for r in returns)
    terms = trainer.model_step()
    assert "total" in terms
    saliency = trainer.saliency(seed=3)
    assert len(saliency) == 8 and all(v >= 0.0 for row in saliency for v in row)

    with tempfile.TemporaryDirectory() as d:
        trainer.write_outputs(d)
        rows = sensorlab.aggregate([d], resamples=100)
        assert [r[2] for r in rows] == [60, 120]
        assert sensorlab.cli(["eval", "--run", d, "--rollouts", "2", "--out", d + "/returns.csv"]) == 0
    assert sensorlab.cli(["train"]) == 2
    print("python smoke test passed:", config.objective, "eval returns", [round(r, 3) for r in returns])


if __name__ == "__main__":
    main()
