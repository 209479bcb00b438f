"""A tour of the five attacks on a small shapes classifier.

Trains the desk classifier on synthetic shapes, attacks 60 test images with
each method and prints the average perturbation norms of the successful
examples. Gradient-sign attacks spend their whole L-inf budget; DeepFool and
C&W look for the smallest change that flips the label, so their norms are an
order of magnitude smaller.

Run with ``python demos/attack_tour.py`` (about a minute on one core).
"""

import numpy as np

from aeae import attacks as A
from aeae.data import synth_dataset
from aeae.models import TrainConfig, build_classifier, predict_label, train_classifier


def main():
    train, test = synth_dataset(count=900, seed=0).split(700)
    clf = build_classifier(train.image_shape, 5, seed=0)
    clf, _ = train_classifier(clf, train.images, train.labels, TrainConfig(learning_rate=0.005, epochs=15, seed=0))
    x, y = test.images[:60], test.labels[:60]
    print(f"clean accuracy on the attacked images: {np.mean(predict_label(clf, x) == y):.3f}\n")

    configs = [
        A.AttackConfig("fgsm", epsilon=0.1),
        A.AttackConfig("bim", epsilon=0.1),
        A.AttackConfig("pgd", epsilon=0.1, seed=1),
        A.AttackConfig("deepfool"),
        A.AttackConfig("cw", steps=100),
    ]
    suite = A.generate_suite(clf, x, y, configs)
    print(f"{'attack':<12}{'success':>9}{'L0':>8}{'L2':>9}{'Linf':>8}")
    for row in suite.summary:
        rate = row["successes"] / row["attempted"]
        print(f"{row['attack']:<12}{rate:>9.2f}{row['l0']:>8.3f}{row['l2']:>9.4f}{row['linf']:>8.4f}")

    # one image, before and after
    res = suite.raw["deepfool"]
    i = int(np.flatnonzero(res.success)[0])
    print(f"\nDeepFool moved image {i} from class {res.original_labels[i]} to {res.adversarial_labels[i]}"
          f" with L2 = {res.l2[i]:.4f} after {res.iterations_used[i]} step(s).")


if __name__ == "__main__":
    main()
