"""Train the desk-scale models used by the acceptance suite into the model cache.

    python scripts/warm_cache.py            # ioi and mcqa seeds 0-2, arithmetic seed 0
    python scripts/warm_cache.py mcqa 1     # a single task / seed
"""

import sys
import time

from mechbench.data import prompt_batch
from mechbench.pipeline import prepare_model, recipe_config, task_kwargs
from mechbench.tasks import generate
from mechbench.training import accuracy

DEFAULT = [("ioi", 0), ("mcqa", 0), ("arithmetic", 0), ("ioi", 1), ("ioi", 2), ("mcqa", 1), ("mcqa", 2)]


def main(argv: list[str]) -> None:
    jobs = [(argv[0], int(argv[1]))] if argv else DEFAULT
    for task, seed in jobs:
        start = time.time()
        model = prepare_model(task, recipe_config(task, seed))
        test = generate(task, 300, 0, "test_public", **task_kwargs(task))
        acc = accuracy(model, prompt_batch(model.vocab, [(i.prompt, i.answer) for i in test]))
        print(f"{task} seed {seed}: test accuracy {acc:.3f} ({time.time() - start:.0f}s)", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
