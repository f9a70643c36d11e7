from .generator import FEATURES, CorpusSpec, Generated, SpecInfeasible, default_corpus, generate, spec_for_index

__all__ = ["FEATURES", "CorpusSpec", "Generated", "SpecInfeasible", "default_corpus", "generate", "spec_for_index"]
