from progda.schedule import SchedulePolicy
from progda.trainer import TrainConfig


def test_reference_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.tau, cfg.momentum, cfg.queue_capacity) == (0.07, 0.99, 1024)
    assert (cfg.delta, cfg.gamma) == (0.1, 0.7)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay) == (0.9, 0.999, 5e-4)
    assert cfg.margin == 0.3


def test_reference_schedule():
    p = SchedulePolicy()
    assert (p.kind, p.k, p.e1, p.e2, p.e3) == ("k_step", 3, 20, 50, 80)
    assert (p.lambda_s, p.lambda_t) == (0.2, 0.8)
