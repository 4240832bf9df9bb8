"""A configuration small enough for end-to-end plumbing tests."""
from q2rl.config import from_dict

TINY = {
    "bc": {"n_demos": 6, "epochs": 5, "hidden_dims": [16, 16], "batch_size": 64},
    "q_estimation": {"n_rollouts": 3, "value_steps": 10, "init_steps": 10, "batch_size": 32,
                     "value_hidden_dims": [16, 16]},
    "rl": {"batch_size": 16, "ensemble_size": 3, "hidden_dims": [16, 16], "utd": 2},
    "driver": {"total_env_steps": 90, "eval_every": 45, "eval_episodes": 2},
}


def tiny_config(**sections):
    doc = {k: dict(v) for k, v in TINY.items()}
    for key, val in sections.items():
        if isinstance(val, dict):
            doc.setdefault(key, {}).update(val)
        else:
            doc[key] = val
    return from_dict(doc)
