from .model import (CodecConfig, SemanticCodec, attention, binarize_mask, compress, keep_count,
                    kl_divergence, patch_embed, skd_losses)
from .payload import (HEADER_BITS, SemanticPayload, full_bits, kept_bits, pack_payload, nominal_kept_bits,
                      payload_bits, unpack_payload)
from .training import LinkSpec, load_codec, params_checksum, run_codec, save_codec, toy_object_views, train_codec
