import itertools

from .scenarios import make, register, registered

_scenarios = ["sine_walk", "squat", "spin", "constant"]

_variants = {
    "": {},
    "-clean": {"rotation_noise": 0.0, "translation_noise": 0.0},
    "-noisy": {
        "prediction_noise": {"sigma_kp": 2.0, "sigma_vel": 0.05, "sigma_acc": 0.5, "dropout_prob": 0.05}
    },
}

for name, variant in itertools.product(_scenarios, _variants):
    register(
        id=f"{name}{variant}",
        entry_point=f"motion_refine.scenarios:{name}",
        kwargs=_variants[variant],
    )

for variant in ("", "-noisy"):
    register(
        id=f"oversmoothed_walk{variant}",
        entry_point="motion_refine.scenarios:oversmoothed_walk",
        kwargs=_variants[variant],
    )
