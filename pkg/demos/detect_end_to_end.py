"""The whole detector on a laptop-sized problem.

1. Train a classifier and an autoencoder on benign shapes.
2. Describe every image by (reconstruction MSE, KL between the classifier's
   outputs on the image and on its reconstruction).
3. Fit an isolation forest on benign descriptions only.
4. Attack held-out images and see how many the forest flags.

The detector never sees an adversarial example before evaluation. The
numbers printed are from a reduced setup; ``aeae pipeline`` runs the full
default configuration (about four minutes).
"""

import numpy as np

from aeae import attacks as A
from aeae import detector as D
from aeae.data import synth_dataset
from aeae.models import TrainConfig, build_autoencoder, build_classifier, train_autoencoder, train_classifier


def main():
    ds = synth_dataset(count=1500, seed=3)
    train, rest = ds.split(800)
    fit, test = rest.split(400)

    clf = build_classifier(train.image_shape, 5, seed=1)
    clf, _ = train_classifier(clf, train.images, train.labels, TrainConfig(learning_rate=0.005, epochs=15, seed=1))
    ae = build_autoencoder(train.image_shape, 16, seed=2)
    ae, hist = train_autoencoder(ae, train.images, TrainConfig(learning_rate=0.01, epochs=25, seed=2))
    print(f"autoencoder reconstruction loss {hist[-1]:.5f}")

    det = D.fit_detector(ae, clf, fit.images, contamination=0.1, seed=4)
    x, y = test.images[:80], test.labels[:80]
    sets = {}
    for cfg in [A.AttackConfig("fgsm", epsilon=0.1), A.AttackConfig("pgd", epsilon=0.3, seed=5), A.AttackConfig("deepfool")]:
        res = A.run_attack(clf, x, y, cfg).successful()
        sets[cfg.name] = res.adversarial
    report = D.evaluate(det, test.images, sets)
    print(f"\n{'attack':<12}{'n':>5}{'TPR':>7}{'FPR':>7}{'F1':>7}")
    for c in report.per_attack + [report.overall]:
        print(f"{c.name:<12}{c.tp + c.fn:>5}{c.tpr:>7.2f}{c.fpr:>7.2f}{c.f1:>7.2f}")

    # where the points fall in feature space
    ben = D.extract_feature(det, test.images)
    adv = D.extract_feature(det, sets["pgd_eps0.3"])
    print(f"\nmedian benign (mse, kl): {np.median(ben, axis=0).round(5)}")
    print(f"median PGD    (mse, kl): {np.median(adv, axis=0).round(5)}")


if __name__ == "__main__":
    main()
