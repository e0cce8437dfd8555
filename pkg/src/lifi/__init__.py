"""Attribute-controlled generation with fused parallel adapters on a frozen transformer LM."""

from .adapters import AdapterBank, AdapterParams, adapter_forward, count_extra_params
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import AttributeClassifier, pseudo_label, train_classifier
from .config import RunConfig, load_config
from .data import CorpusRecord, SyntheticSpec, load_corpus, make_synthetic, preset
from .evaluation import EvalReport, correctness, dist_n, perplexity, relevance, render_report
from .fusion import AdapterFusion, ControlCode, FusionGate, fusion_weights, make_test_code
from .generation import GenerationParams, alpha_sweep, generate, top_k_sample
from .pipeline import RunManifest, pretrain_base, run_full_pipeline, train_adapters
from .transformer import ModelConfig, Transformer, TransformerLM
from .vocab import Vocab

__version__ = "0.1.0"
