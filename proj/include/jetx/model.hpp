#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include "jetx/tensor.hpp"

namespace jetx {

enum class NormKind { none, layernorm, rmsnorm };
enum class Activation { gelu, gelu_tanh, silu, identity };
enum class BlockKind { attention, mlp };

std::string to_string(NormKind k);
std::string to_string(Activation a);
std::string to_string(BlockKind k);
NormKind parse_norm_kind(const std::string& s);
Activation parse_activation(const std::string& s);

struct NormParams {
  NormKind kind = NormKind::none;
  std::vector<double> scale;  // empty means all ones
  std::vector<double> bias;   // empty means all zeros
  double eps = 1e-5;
};

struct AttentionParams {
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;
  Tensor wq, wk, wv;  // d x (heads * head_dim)
  Tensor wo;          // (heads * head_dim) x d
  std::vector<double> bq, bk, bv, bo;  // empty means zero
};

struct MlpParams {
  std::size_t hidden_dim = 0;
  Activation activation = Activation::gelu;
  Tensor win;   // d x hidden
  Tensor wout;  // hidden x d
  std::vector<double> bin, bout;
};

/// One residual block gamma_l = sublayer o pre-norm. The norm lives inside
/// the block's nonlinearity.
struct Block {
  BlockKind kind = BlockKind::mlp;
  NormParams norm;
  AttentionParams attn;
  MlpParams mlp;
};

/// Explicit pre-norm residual transformer. Blocks are numbered 1..L; index
/// L+1 refers to the final norm feeding the unembedding.
struct ModelSpec {
  std::string model_id;
  std::size_t vocab_size = 0;
  std::size_t hidden_dim = 0;
  Tensor embed;    // c x d
  Tensor unembed;  // c x d, logits = U * final_norm(h)
  std::optional<Tensor> positions;  // max_positions x d
  std::vector<Block> blocks;
  NormParams final_norm;
  bool tied_embeddings = false;
  std::vector<std::string> vocab;
  std::optional<long long> step;

  std::size_t num_blocks() const noexcept { return blocks.size(); }
  const Block& block(std::size_t l) const;  // 1-based

  /// Throws ShapeError/FormatError on any inconsistency.
  void validate() const;

  std::optional<int> token_id(const std::string& s) const;
  /// Order-sensitive fingerprint of the vocabulary, used to guard diffs.
  std::string vocab_fingerprint() const;
  /// Short role label for block l ("attn:1", "mlp:2") or "final_norm".
  std::string block_label(std::size_t l) const;
};

/// Reads a .jetm tensor archive (8-byte little-endian header length, JSON
/// header, little-endian tensor data).
ModelSpec load_model(const std::filesystem::path& path);
ModelSpec parse_model(const std::vector<unsigned char>& bytes, const std::string& origin = "<memory>");

enum class StorageType { f32, f64 };
void save_model(const ModelSpec& model, const std::filesystem::path& path, StorageType storage = StorageType::f64);
std::vector<unsigned char> serialize_model(const ModelSpec& model, StorageType storage = StorageType::f64);

/// FNV-1a 64-bit digest, hex encoded.
std::string content_hash(std::span<const unsigned char> bytes);
std::string file_hash(const std::filesystem::path& path);
std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);

/// Whitespace-separated vocabulary words to ids; unknown words raise FormatError.
std::vector<int> tokenize(const ModelSpec& model, const std::string& text);

}  // namespace jetx
