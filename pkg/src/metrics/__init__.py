# Evaluation metrics, complexity model and attention benchmark
