"""Adversarial prompt tuning for frozen dual image/text encoders."""

from .attacks import (AdversarialBatch, AttackConfig, bank_attack, contrastive_attack_loss, eval_attack,
                      kl_embedding_loss, pgd_attack, pgd_attack_batch)
from .bank import (AdversarialEmbeddingBank, MiniBatch, build_bank, clean_bank, iterate_minibatches, load_bank,
                   save_bank, verify_provenance)
from .defenses import DefenseTransform, apply_defense, evaluate_defended
from .encoders import (EncoderPair, LabeledImageDataset, MiniCLIPConfig, TokenEmbeddingTable, embed_class_name,
                       encode_image, load_checkpoint, save_checkpoint)
from .errors import (AdvPTError, ConfigError, CorruptionError, DimensionError, DivergenceError, FormatError,
                     InputError, IntegrityError, NumericError, StageError, VocabularyError)
from .harness import (EvaluationReport, RunConfig, domain_shift_eval, emit_report, evaluate_context, load_config,
                      m_sweep, nearest_words, run_pipeline, tradeoff_sweep)
from .miniclip import build_mini_clip
from .prompts import (PromptContext, TuneConfig, encode_prompts, fixed_prompt_embeddings, init_context,
                      load_context, predict_prob, save_context, tune)

__version__ = "0.1.0"
