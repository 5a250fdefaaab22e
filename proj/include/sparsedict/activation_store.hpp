#pragma once

// Binary persistence for activation datasets (.sact), dictionaries and
// direction sets (.sdic), vocabularies and token streams.
//
// .sact layout, all little-endian:
//   0  magic "SACT"
//   4  u32 version (1)
//   8  u32 d_in
//   12 u64 count
//   20 u8  dtype (0 = f32)
//   21 15 reserved zero bytes
//   36 count * d_in f32 values, row-major
//
// .sdic layout:
//   0  magic "SDIC"
//   4  u32 version (1)
//   8  u32 d_hid
//   12 u32 d_in
//   16 u8  flags: bit 0 tied, bit 1 mean appended, bits 4..7 DictionaryKind
//   17 15 reserved zero bytes
//   32 encoder rows (d_hid * d_in f32), bias (d_hid f32),
//      decoder rows if untied (d_hid * d_in f32), mean if flagged (d_in f32)

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparsedict/dictionary.hpp"
#include "sparsedict/types.hpp"

namespace sparsedict {

namespace fs = std::filesystem;

inline constexpr std::uint32_t kSactVersion = 1;
inline constexpr std::uint32_t kSdicVersion = 1;
inline constexpr std::size_t kSactHeaderBytes = 36;
inline constexpr std::size_t kSdicHeaderBytes = 32;

struct DatasetHeader {
  std::uint32_t version = kSactVersion;
  std::uint32_t d_in = 0;
  std::uint64_t count = 0;
  std::uint8_t dtype = 0;

  std::uint64_t payload_bytes() const { return count * d_in * sizeof(float); }
  std::array<std::uint8_t, kSactHeaderBytes> encode() const;
  // Throws FormatError on bad magic/version/dtype/reserved bytes.
  static DatasetHeader decode(std::span<const std::uint8_t, kSactHeaderBytes> bytes);
};

enum class HookPoint { residual, mlp, other };

std::string to_string(HookPoint hook);
HookPoint hook_point_from_string(const std::string& name);

struct DatasetMeta {
  std::string model_name;
  std::int64_t layer_index = 0;
  HookPoint hook_point = HookPoint::other;
  std::string source_corpus;
  std::string created_by;
};

fs::path meta_path_for(const fs::path& dataset_path);
void write_meta(const DatasetMeta& meta, const fs::path& dataset_path);
DatasetMeta read_meta(const fs::path& dataset_path);

// Writes rows incrementally to `<path>.tmp`, renaming into place on close().
// A writer destroyed without close() removes its temporary file.
class DatasetWriter {
 public:
  DatasetWriter(fs::path path, std::uint32_t d_in, DatasetMeta meta);
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;
  ~DatasetWriter();

  void append(std::span<const float> row);
  void append(const Matrix& rows);
  DatasetHeader close();

  std::uint64_t count() const { return header_.count; }

 private:
  fs::path path_;
  fs::path tmp_path_;
  DatasetMeta meta_;
  DatasetHeader header_;
  std::ofstream out_;
  std::vector<std::uint8_t> scratch_;
  bool closed_ = false;
};

DatasetHeader write_dataset(const Matrix& rows, const DatasetMeta& meta, const fs::path& path);
// Ragged input raises DimensionError; `d_in` is needed for the empty case.
DatasetHeader write_dataset(const std::vector<std::vector<float>>& rows, std::uint32_t d_in,
                            const DatasetMeta& meta, const fs::path& path);

// Streams a dataset in batches. Memory use is one batch plus a byte buffer.
class DatasetReader {
 public:
  explicit DatasetReader(fs::path path, std::size_t batch_size = 1024);

  const DatasetHeader& header() const { return header_; }
  const fs::path& path() const { return path_; }
  Index d_in() const { return static_cast<Index>(header_.d_in); }
  std::uint64_t count() const { return header_.count; }

  // Fills `batch` with up to batch_size rows. Returns false at end of data.
  bool next(Matrix& batch);
  void rewind();
  // Random access, independent of the batch cursor.
  void read_row(std::uint64_t index, std::span<float> out);

 private:
  void read_rows(std::uint64_t first, std::uint64_t n, float* out);

  fs::path path_;
  std::size_t batch_size_;
  std::ifstream in_;
  DatasetHeader header_;
  std::uint64_t cursor_ = 0;
  std::vector<std::uint8_t> scratch_;
};

DatasetReader read_dataset(const fs::path& path, std::size_t batch_size);
Matrix read_all(const fs::path& path);

// Per-dimension mean and population variance, accumulated in double.
struct DimensionStats {
  VectorD mean;
  VectorD variance;
  std::uint64_t count = 0;
};

class RunningStats {
 public:
  explicit RunningStats(Index dim);
  void add(const Matrix& batch);
  DimensionStats finish() const;

 private:
  VectorD mean_;
  VectorD m2_;
  std::uint64_t count_ = 0;
};

DimensionStats stream_statistics(DatasetReader& reader);

struct SplitPaths {
  fs::path train;
  fs::path holdout;
};

// Seeded Fisher-Yates permutation of the rows, then the first
// floor(train_fraction * count) rows go to train and the rest to holdout.
// Outputs default to `<stem>.train.sact` / `<stem>.holdout.sact`.
SplitPaths shuffle_split(const fs::path& dataset, std::uint64_t seed, double train_fraction,
                         std::optional<SplitPaths> outputs = std::nullopt);

enum class DictionaryKind : std::uint8_t {
  learned = 0,
  pca = 1,
  ica = 2,
  random = 3,
  neuron_basis = 4,
  ground_truth = 5,
};

std::string to_string(DictionaryKind kind);
DictionaryKind dictionary_kind_from_string(const std::string& name);

struct DictionaryFile {
  Dictionary dict;
  DictionaryKind kind = DictionaryKind::learned;
  std::optional<Vector> mean;
};

void write_dictionary(const Dictionary& dict, const fs::path& path,
                      DictionaryKind kind = DictionaryKind::learned,
                      const std::optional<Vector>& mean = std::nullopt);
DictionaryFile read_dictionary_file(const fs::path& path);
inline Dictionary read_dictionary(const fs::path& path) { return read_dictionary_file(path).dict; }

// Vocabulary: JSON-lines, one JSON string per line, line index = token id.
std::vector<std::string> read_vocab(const fs::path& path);
void write_vocab(const std::vector<std::string>& vocab, const fs::path& path);

// Token stream aligned with a dataset: JSON-lines objects
// {"doc": <int>, "token": <string>}, one per activation row, in row order.
struct TokenStream {
  std::vector<std::string> tokens;
  std::vector<std::int64_t> doc_ids;
  std::size_t size() const { return tokens.size(); }
};

TokenStream read_token_stream(const fs::path& path);
void write_token_stream(const TokenStream& stream, const fs::path& path);

}  // namespace sparsedict
