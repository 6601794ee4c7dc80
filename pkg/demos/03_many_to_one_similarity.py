"""Many-to-one conversion of three toy speakers and the cosine-similarity harness.

Each toy speaker is shared sentence content plus a fixed channel offset.  After
training, converted speech should sit closer to the target than to its source,
while inverting the conversion should bring the source identity back.

    python demos/03_many_to_one_similarity.py [steps]
"""

import sys

import numpy as np

from invvc.alignment import AlignedPair
from invvc.evaluation import PairSet, similarity_csv, similarity_suite
from invvc.model import InvvcModel, ModelConfig, NetConfig
from invvc.synthetic import speaker_corpus
from invvc.training import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600

corp = speaker_corpus(n_speakers=3, n_sentences=60, seed=0)
pairs = [AlignedPair(corp.sources[k][i], corp.targets[i]) for k in range(3) for i in range(30)]
config = ModelConfig(n_invconv=2, n_flows=6, net=NetConfig(n_blocks=1, d_h=32, block_inner_channels=64))
model = train(pairs, InvvcModel(config, dtype=np.float32), TrainConfig(crop_length=40, max_steps=steps)).model

# speaker 0, held-out sentences
src = [corp.sources[0][i] for i in range(30, 60)]
tgt = [corp.targets[i] for i in range(30, 60)]
vc = [model.convert(s).astype(np.float64) for s in src]
inv = [model.invert(v).astype(np.float64) for v in vc]
sets = [
    PairSet("Tgt-Tgt", tgt),
    PairSet("Tgt-VC", tgt, vc, "cross"),
    PairSet("Tgt-INV", tgt, inv, "cross"),
    PairSet("Src-Src", src),
    PairSet("Src-INV", src, inv, "cross"),
]
reports = similarity_suite(sets, pairs_per_set=400, seed=0)
# each conversion against its own source sentence: only 30 such pairs exist
reports += similarity_suite([PairSet("Src-VC", src, vc, "matched")], pairs_per_set=30, seed=0)
print(similarity_csv(reports))
