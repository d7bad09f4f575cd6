"""
Simple example of training a small registering model and translating with it.
"""

from corpus import build_corpus, build_graph, build_languages, encode
from layout import build_layout, build_mask, format_mask
from metrics import evaluate
from model import ModelConfig, init_params
from search import translate
from training import TrainConfig, Trainer

# Create four artificial languages and a star-shaped supervision graph
print("Generating a synthetic corpus...")
languages, vocab = build_languages(num_languages=4, concepts=12, seed=0)
graph = build_graph(4)
corpus = build_corpus(languages, vocab, graph, sizes=400, length_range=(2, 5), seed=0,
                      n_valid=10, n_test=10)
print(f"Vocabulary: {vocab.size} tokens")
print(f"Supervised directions: {len(graph.supervised_directions())}, "
      f"zero-shot: {len(graph.zero_shot_directions())}")
print()

# What the registering mask looks like for a short sentence
print("Attention mask (source 4, target 3):")
layout = build_layout(4, 3, "registering")
print(format_mask(layout, build_mask(layout)))
print()

# Train (this takes a minute or two)
print("Training...")
config = ModelConfig(vocab_size=vocab.size, d_model=32, n_heads=2, n_layers=2, d_ff=64,
                     dropout=0.0, attention_dropout=0.0, max_positions=64, variant="registering")
params = init_params(config, seed=0)
train_config = TrainConfig(lr_peak=3e-3, warmup_steps=50, max_steps=800, batch_tokens=512,
                           log_interval=100, valid_interval=0, seed=0)
log = Trainer(params, languages, corpus.train, corpus.valid, "registering", train_config).run()
print(f"Final loss: {log.steps[-1][2]:.4f}")
print()

# Translate one unseen zero-shot sentence
inst = next(i for i in corpus.test if not graph.is_supervised(*i.direction))
source_ids, _ = encode(inst, languages)
hyp = translate(params, source_ids, beam=5)
print(f"Direction: L{inst.src_lang} -> L{inst.tgt_lang}")
print(f"Source:     {' '.join(vocab.id_to_token(t) for t in inst.x)}")
print(f"Reference:  {' '.join(vocab.id_to_token(t) for t in inst.y)}")
print(f"Hypothesis: {' '.join(vocab.id_to_token(t) for t in hyp)}")
print()

# Score the whole test split
print("Evaluating...")
report = evaluate(params, corpus.test, languages, vocab, graph, beam=5)
print(report.summary())
