# coding: utf-8
# # Corpus files, trial lists, EER
#
# Corpora are stored in a small versioned binary format; trial lists are
# plain text, one `flag idA idB` per line.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from cdvat import dataio, evaluation

tmp = Path(tempfile.mkdtemp())
cfg = dataio.SynthConfig(n_speakers_labeled=3, n_speakers_unlabeled=2, n_speakers_eval=0,
                         utterances_per_speaker=4, seed=7)
corpus = dataio.synth_generate(cfg)
dataio.save_corpus(corpus, tmp / "corpus.bin")
back = dataio.load_corpus(tmp / "corpus.bin")
print(len(back), back[0].id, back[0].features.shape, (tmp / "corpus.bin").stat().st_size, "bytes")

# Truncated files fail with the byte offset where parsing stopped.

# In[2]:

data = (tmp / "corpus.bin").read_bytes()
try:
    dataio.corpus_from_bytes(data[:100])
except dataio.FormatError as exc:
    print(exc)

# A trial list over the corpus, scored with per-utterance mean frames as
# stand-in embeddings.

# In[3]:

trials = evaluation.make_trials(corpus, seed=0)
(tmp / "trials.txt").write_text(evaluation.format_trials(trials))
emb = {u.id: u.features.mean(axis=0) for u in corpus}
scores = evaluation.score_trials(trials, emb)
labels = [t for *_, t in trials]
print("EER", evaluation.eer(scores, labels), "brute force", evaluation.eer_bruteforce(scores, labels))
