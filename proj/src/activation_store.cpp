#include "sparsedict/activation_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace sparsedict {

namespace {

using json = nlohmann::json;

constexpr std::array<char, 4> kSactMagic{'S', 'A', 'C', 'T'};
constexpr std::array<char, 4> kSdicMagic{'S', 'D', 'I', 'C'};

template <typename T>
void put_le(std::uint8_t* dst, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    dst[i] = static_cast<std::uint8_t>(bits >> (8 * i));
  }
}

template <typename T>
T get_le(const std::uint8_t* src) {
  using U = std::make_unsigned_t<T>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(src[i]) << (8 * i);
  }
  return static_cast<T>(bits);
}

// f32 <-> little-endian bytes. The fast path is a memcpy on LE hosts.
void floats_to_le(const float* src, std::size_t n, std::uint8_t* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      put_le<std::uint32_t>(dst + 4 * i, std::bit_cast<std::uint32_t>(src[i]));
    }
  }
}

void le_to_floats(const std::uint8_t* src, std::size_t n, float* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = std::bit_cast<float>(get_le<std::uint32_t>(src + 4 * i));
    }
  }
}

void check_finite(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw ValidationError("non-finite value in activation row");
    }
  }
}

void write_floats(std::ofstream& out, const float* data, std::size_t n, const fs::path& path) {
  std::vector<std::uint8_t> bytes(n * sizeof(float));
  floats_to_le(data, n, bytes.data());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void read_floats(std::ifstream& in, float* data, std::size_t n, const fs::path& path) {
  std::vector<std::uint8_t> bytes(n * sizeof(float));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw CorruptionError("unexpected end of file: " + path.string());
  }
  le_to_floats(bytes.data(), n, data);
}

}  // namespace

std::array<std::uint8_t, kSactHeaderBytes> DatasetHeader::encode() const {
  std::array<std::uint8_t, kSactHeaderBytes> out{};
  std::memcpy(out.data(), kSactMagic.data(), 4);
  put_le<std::uint32_t>(out.data() + 4, version);
  put_le<std::uint32_t>(out.data() + 8, d_in);
  put_le<std::uint64_t>(out.data() + 12, count);
  out[20] = dtype;
  return out;
}

DatasetHeader DatasetHeader::decode(std::span<const std::uint8_t, kSactHeaderBytes> bytes) {
  if (std::memcmp(bytes.data(), kSactMagic.data(), 4) != 0) {
    throw FormatError("bad magic: not a .sact file");
  }
  DatasetHeader h;
  h.version = get_le<std::uint32_t>(bytes.data() + 4);
  h.d_in = get_le<std::uint32_t>(bytes.data() + 8);
  h.count = get_le<std::uint64_t>(bytes.data() + 12);
  h.dtype = bytes[20];
  if (h.version != kSactVersion) {
    throw FormatError("unsupported .sact version " + std::to_string(h.version));
  }
  if (h.dtype != 0) {
    throw FormatError("unsupported dtype code " + std::to_string(h.dtype));
  }
  if (h.d_in == 0) throw FormatError("d_in must be at least 1");
  for (std::size_t i = 21; i < kSactHeaderBytes; ++i) {
    if (bytes[i] != 0) throw FormatError("reserved header bytes must be zero");
  }
  return h;
}

std::string to_string(HookPoint hook) {
  switch (hook) {
    case HookPoint::residual: return "residual";
    case HookPoint::mlp: return "mlp";
    case HookPoint::other: return "other";
  }
  return "other";
}

HookPoint hook_point_from_string(const std::string& name) {
  if (name == "residual") return HookPoint::residual;
  if (name == "mlp") return HookPoint::mlp;
  if (name == "other") return HookPoint::other;
  throw FormatError("unknown hook_point '" + name + "'");
}

fs::path meta_path_for(const fs::path& dataset_path) {
  return fs::path(dataset_path.string() + ".meta.json");
}

void write_meta(const DatasetMeta& meta, const fs::path& dataset_path) {
  json j = {
      {"model_name", meta.model_name},
      {"layer_index", meta.layer_index},
      {"hook_point", to_string(meta.hook_point)},
      {"source_corpus", meta.source_corpus},
      {"created_by", meta.created_by},
  };
  auto path = meta_path_for(dataset_path);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

DatasetMeta read_meta(const fs::path& dataset_path) {
  auto path = meta_path_for(dataset_path);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
    DatasetMeta meta;
    meta.model_name = j.at("model_name").get<std::string>();
    meta.layer_index = j.at("layer_index").get<std::int64_t>();
    meta.hook_point = hook_point_from_string(j.at("hook_point").get<std::string>());
    meta.source_corpus = j.at("source_corpus").get<std::string>();
    meta.created_by = j.at("created_by").get<std::string>();
    if (meta.layer_index < 0) throw FormatError("layer_index must be >= 0");
    return meta;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

DatasetWriter::DatasetWriter(fs::path path, std::uint32_t d_in, DatasetMeta meta)
    : path_(std::move(path)), meta_(std::move(meta)) {
  if (d_in == 0) throw DimensionError("d_in must be at least 1");
  header_.d_in = d_in;
  tmp_path_ = fs::path(path_.string() + ".tmp");
  out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open " + tmp_path_.string() + " for writing");
  auto bytes = header_.encode();
  out_.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  scratch_.resize(std::size_t{d_in} * sizeof(float));
}

DatasetWriter::~DatasetWriter() {
  if (!closed_) {
    out_.close();
    std::error_code ec;
    fs::remove(tmp_path_, ec);
  }
}

void DatasetWriter::append(std::span<const float> row) {
  if (row.size() != header_.d_in) {
    throw DimensionError("row has length " + std::to_string(row.size()) + ", expected " +
                         std::to_string(header_.d_in));
  }
  check_finite(row);
  floats_to_le(row.data(), row.size(), scratch_.data());
  out_.write(reinterpret_cast<const char*>(scratch_.data()),
             static_cast<std::streamsize>(scratch_.size()));
  if (!out_) throw IoError("write failed: " + tmp_path_.string());
  ++header_.count;
}

void DatasetWriter::append(const Matrix& rows) {
  if (rows.cols() != static_cast<Index>(header_.d_in)) {
    throw DimensionError("matrix has " + std::to_string(rows.cols()) + " columns, expected " +
                         std::to_string(header_.d_in));
  }
  for (Index i = 0; i < rows.rows(); ++i) {
    append(std::span<const float>(rows.row(i).data(), static_cast<std::size_t>(rows.cols())));
  }
}

DatasetHeader DatasetWriter::close() {
  if (closed_) return header_;
  auto bytes = header_.encode();
  out_.seekp(0);
  out_.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  out_.close();
  if (!out_) throw IoError("write failed: " + tmp_path_.string());
  fs::rename(tmp_path_, path_);
  write_meta(meta_, path_);
  closed_ = true;
  return header_;
}

DatasetHeader write_dataset(const Matrix& rows, const DatasetMeta& meta, const fs::path& path) {
  if (rows.cols() < 1) throw DimensionError("d_in must be at least 1");
  check_finite(std::span<const float>(rows.data(), static_cast<std::size_t>(rows.size())));
  DatasetWriter writer(path, static_cast<std::uint32_t>(rows.cols()), meta);
  writer.append(rows);
  return writer.close();
}

DatasetHeader write_dataset(const std::vector<std::vector<float>>& rows, std::uint32_t d_in,
                            const DatasetMeta& meta, const fs::path& path) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d_in) {
      throw DimensionError("ragged rows: row " + std::to_string(i) + " has length " +
                           std::to_string(rows[i].size()) + ", expected " + std::to_string(d_in));
    }
    check_finite(rows[i]);
  }
  DatasetWriter writer(path, d_in, meta);
  for (const auto& row : rows) writer.append(row);
  return writer.close();
}

DatasetReader::DatasetReader(fs::path path, std::size_t batch_size)
    : path_(std::move(path)), batch_size_(batch_size) {
  if (batch_size_ == 0) throw ArgumentError("batch_size must be positive");
  in_.open(path_, std::ios::binary);
  if (!in_) throw IoError("cannot open " + path_.string());
  std::array<std::uint8_t, kSactHeaderBytes> bytes{};
  in_.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (static_cast<std::size_t>(in_.gcount()) != bytes.size()) {
    throw CorruptionError("file shorter than header: " + path_.string());
  }
  header_ = DatasetHeader::decode(bytes);
  auto expected = kSactHeaderBytes + header_.payload_bytes();
  auto actual = fs::file_size(path_);
  if (actual != expected) {
    throw CorruptionError(path_.string() + ": length " + std::to_string(actual) +
                          " bytes, header implies " + std::to_string(expected));
  }
}

void DatasetReader::read_rows(std::uint64_t first, std::uint64_t n, float* out) {
  auto offset = kSactHeaderBytes + first * header_.d_in * sizeof(float);
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(offset));
  auto n_bytes = n * header_.d_in * sizeof(float);
  scratch_.resize(n_bytes);
  in_.read(reinterpret_cast<char*>(scratch_.data()), static_cast<std::streamsize>(n_bytes));
  if (static_cast<std::uint64_t>(in_.gcount()) != n_bytes) {
    throw CorruptionError("unexpected end of file: " + path_.string());
  }
  le_to_floats(scratch_.data(), n * header_.d_in, out);
}

bool DatasetReader::next(Matrix& batch) {
  if (cursor_ >= header_.count) return false;
  auto n = std::min<std::uint64_t>(batch_size_, header_.count - cursor_);
  batch.resize(static_cast<Index>(n), d_in());
  read_rows(cursor_, n, batch.data());
  cursor_ += n;
  return true;
}

void DatasetReader::rewind() { cursor_ = 0; }

void DatasetReader::read_row(std::uint64_t index, std::span<float> out) {
  if (index >= header_.count) throw DimensionError("row index out of range");
  if (out.size() != header_.d_in) throw DimensionError("output span has wrong length");
  read_rows(index, 1, out.data());
}

DatasetReader read_dataset(const fs::path& path, std::size_t batch_size) {
  return DatasetReader(path, batch_size);
}

Matrix read_all(const fs::path& path) {
  DatasetReader reader(path, 1u << 16);
  Matrix all(static_cast<Index>(reader.count()), reader.d_in());
  Matrix batch;
  Index row = 0;
  while (reader.next(batch)) {
    all.middleRows(row, batch.rows()) = batch;
    row += batch.rows();
  }
  return all;
}

RunningStats::RunningStats(Index dim) : mean_(VectorD::Zero(dim)), m2_(VectorD::Zero(dim)) {}

void RunningStats::add(const Matrix& batch) {
  if (batch.cols() != mean_.size()) throw DimensionError("batch dimension mismatch");
  if (batch.rows() == 0) return;
  // Chan et al. pairwise merge of the batch's own mean/M2 into the running state.
  const auto nb = static_cast<double>(batch.rows());
  VectorD batch_mean = batch.cast<double>().colwise().mean().transpose();
  VectorD batch_m2 =
      (batch.cast<double>().rowwise() - batch_mean.transpose()).array().square().colwise().sum().transpose();
  const auto na = static_cast<double>(count_);
  const double n = na + nb;
  VectorD delta = batch_mean - mean_;
  mean_ += delta * (nb / n);
  m2_ += batch_m2 + delta.cwiseProduct(delta) * (na * nb / n);
  count_ += static_cast<std::uint64_t>(batch.rows());
}

DimensionStats RunningStats::finish() const {
  DimensionStats s;
  s.mean = mean_;
  s.count = count_;
  s.variance = count_ > 0 ? VectorD(m2_ / static_cast<double>(count_)) : VectorD::Zero(m2_.size());
  return s;
}

DimensionStats stream_statistics(DatasetReader& reader) {
  RunningStats stats(reader.d_in());
  reader.rewind();
  Matrix batch;
  while (reader.next(batch)) stats.add(batch);
  return stats.finish();
}

SplitPaths shuffle_split(const fs::path& dataset, std::uint64_t seed, double train_fraction,
                         std::optional<SplitPaths> outputs) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw ArgumentError("train_fraction must lie in (0, 1]");
  }
  DatasetReader reader(dataset, 1);
  const auto n = reader.count();
  const auto n_train = static_cast<std::uint64_t>(std::floor(train_fraction * static_cast<double>(n)));
  if (n_train < 1) throw ArgumentError("train_fraction * count must be at least 1");

  if (!outputs) {
    auto stem = dataset;
    stem.replace_extension();
    outputs = SplitPaths{fs::path(stem.string() + ".train.sact"),
                         fs::path(stem.string() + ".holdout.sact")};
  }

  std::vector<std::uint64_t> order(n);
  std::iota(order.begin(), order.end(), std::uint64_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetMeta meta;
  if (fs::exists(meta_path_for(dataset))) meta = read_meta(dataset);
  DatasetWriter train(outputs->train, reader.header().d_in, meta);
  DatasetWriter holdout(outputs->holdout, reader.header().d_in, meta);
  std::vector<float> row(reader.header().d_in);
  for (std::uint64_t i = 0; i < n; ++i) {
    reader.read_row(order[i], row);
    (i < n_train ? train : holdout).append(row);
  }
  train.close();
  holdout.close();
  return *outputs;
}

std::string to_string(DictionaryKind kind) {
  switch (kind) {
    case DictionaryKind::learned: return "learned";
    case DictionaryKind::pca: return "pca";
    case DictionaryKind::ica: return "ica";
    case DictionaryKind::random: return "random";
    case DictionaryKind::neuron_basis: return "neuron_basis";
    case DictionaryKind::ground_truth: return "ground_truth";
  }
  return "learned";
}

DictionaryKind dictionary_kind_from_string(const std::string& name) {
  for (auto k : {DictionaryKind::learned, DictionaryKind::pca, DictionaryKind::ica,
                 DictionaryKind::random, DictionaryKind::neuron_basis,
                 DictionaryKind::ground_truth}) {
    if (to_string(k) == name) return k;
  }
  if (name == "neuron") return DictionaryKind::neuron_basis;
  throw ArgumentError("unknown dictionary kind '" + name + "'");
}

void write_dictionary(const Dictionary& dict, const fs::path& path, DictionaryKind kind,
                      const std::optional<Vector>& mean) {
  dict.validate();
  if (mean && mean->size() != dict.d_in()) throw DimensionError("mean length must equal d_in");
  auto all_finite = [](const auto& m) { return m.allFinite(); };
  if (!all_finite(dict.encoder) || !all_finite(dict.bias) ||
      (dict.decoder && !all_finite(*dict.decoder)) || (mean && !all_finite(*mean))) {
    throw ValidationError("dictionary contains non-finite values");
  }

  std::array<std::uint8_t, kSdicHeaderBytes> header{};
  std::memcpy(header.data(), kSdicMagic.data(), 4);
  put_le<std::uint32_t>(header.data() + 4, kSdicVersion);
  put_le<std::uint32_t>(header.data() + 8, static_cast<std::uint32_t>(dict.d_hid()));
  put_le<std::uint32_t>(header.data() + 12, static_cast<std::uint32_t>(dict.d_in()));
  std::uint8_t flags = 0;
  if (dict.tied()) flags |= 0x01;
  if (mean) flags |= 0x02;
  flags |= static_cast<std::uint8_t>(static_cast<std::uint8_t>(kind) << 4);
  header[16] = flags;

  auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(header.data()), header.size());
    write_floats(out, dict.encoder.data(), static_cast<std::size_t>(dict.encoder.size()), tmp);
    write_floats(out, dict.bias.data(), static_cast<std::size_t>(dict.bias.size()), tmp);
    if (dict.decoder) {
      write_floats(out, dict.decoder->data(), static_cast<std::size_t>(dict.decoder->size()), tmp);
    }
    if (mean) write_floats(out, mean->data(), static_cast<std::size_t>(mean->size()), tmp);
  }
  fs::rename(tmp, path);
}

DictionaryFile read_dictionary_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<std::uint8_t, kSdicHeaderBytes> header{};
  in.read(reinterpret_cast<char*>(header.data()), header.size());
  if (static_cast<std::size_t>(in.gcount()) != header.size()) {
    throw CorruptionError("file shorter than header: " + path.string());
  }
  if (std::memcmp(header.data(), kSdicMagic.data(), 4) != 0) {
    throw FormatError("bad magic: not a .sdic file");
  }
  auto version = get_le<std::uint32_t>(header.data() + 4);
  if (version != kSdicVersion) throw FormatError("unsupported .sdic version");
  auto d_hid = get_le<std::uint32_t>(header.data() + 8);
  auto d_in = get_le<std::uint32_t>(header.data() + 12);
  auto flags = header[16];
  if (d_hid == 0 || d_in == 0) throw FormatError("d_hid and d_in must be at least 1");
  if ((flags & 0x0C) != 0) throw FormatError("unknown flag bits set");
  auto kind_code = static_cast<std::uint8_t>(flags >> 4);
  if (kind_code > static_cast<std::uint8_t>(DictionaryKind::ground_truth)) {
    throw FormatError("unknown dictionary kind code");
  }
  const bool tied = flags & 0x01;
  const bool has_mean = flags & 0x02;

  std::uint64_t matrix = std::uint64_t{d_hid} * d_in;
  std::uint64_t floats = matrix + d_hid + (tied ? 0 : matrix) + (has_mean ? d_in : 0);
  auto expected = kSdicHeaderBytes + floats * sizeof(float);
  if (fs::file_size(path) != expected) {
    throw CorruptionError(path.string() + ": length does not match header");
  }

  DictionaryFile file;
  file.kind = static_cast<DictionaryKind>(kind_code);
  file.dict.encoder.resize(d_hid, d_in);
  file.dict.bias.resize(d_hid);
  read_floats(in, file.dict.encoder.data(), matrix, path);
  read_floats(in, file.dict.bias.data(), d_hid, path);
  if (!tied) {
    Matrix dec(d_hid, d_in);
    read_floats(in, dec.data(), matrix, path);
    file.dict.decoder = std::move(dec);
  }
  if (has_mean) {
    Vector mean(d_in);
    read_floats(in, mean.data(), d_in, path);
    file.mean = std::move(mean);
  }
  return file;
}

std::vector<std::string> read_vocab(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      vocab.push_back(json::parse(line).get<std::string>());
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(vocab.size() + 1) + ": " + e.what());
    }
  }
  return vocab;
}

void write_vocab(const std::vector<std::string>& vocab, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  for (const auto& token : vocab) out << json(token).dump() << '\n';
}

TokenStream read_token_stream(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  TokenStream stream;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      stream.doc_ids.push_back(j.at("doc").get<std::int64_t>());
      stream.tokens.push_back(j.at("token").get<std::string>());
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return stream;
}

void write_token_stream(const TokenStream& stream, const fs::path& path) {
  if (stream.tokens.size() != stream.doc_ids.size()) {
    throw DimensionError("token stream tokens and doc ids differ in length");
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  for (std::size_t i = 0; i < stream.size(); ++i) {
    out << json{{"doc", stream.doc_ids[i]}, {"token", stream.tokens[i]}}.dump() << '\n';
  }
}

}  // namespace sparsedict
