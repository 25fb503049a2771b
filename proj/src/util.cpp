#include "niab/util.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "niab/error.hpp"

namespace niab {

namespace {

constexpr std::string_view kCodeNames[] = {
    "MalformedRecord",   "UnknownScene",        "DuplicateEpisodeId",
    "LabelOutOfRange",   "ActionNotInVocab",    "VocabTooSmall",
    "InfeasibleTemplate", "EmptyStratum",       "TokenMissing",
    "ZeroVector",        "EmptyVocab",          "BadTableFile",
    "OddDim",            "AllKeysMasked",       "ShapeMismatch",
    "NonFiniteActivation", "TargetMasked",      "NonFiniteGradient",
    "BadCheckpoint",     "NoExpansion",         "PreconditionUnsatisfiable",
    "ExecutionFault",    "BadSimData",          "MissingPrediction",
    "InvalidConfig",     "Io",
};

static_assert(std::size(kCodeNames) == static_cast<std::size_t>(ErrorCode::Io) + 1);

std::string decorate(ErrorCode code, const std::string& message,
                     std::optional<std::size_t> line) {
  std::string out(to_string(code));
  if (line) out += " (line " + std::to_string(*line) + ")";
  out += ": ";
  out += message;
  return out;
}

}  // namespace

std::string_view to_string(ErrorCode code) noexcept {
  return kCodeNames[static_cast<std::size_t>(code)];
}

bool is_validation_error(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedRecord:
    case ErrorCode::UnknownScene:
    case ErrorCode::DuplicateEpisodeId:
    case ErrorCode::LabelOutOfRange:
    case ErrorCode::ActionNotInVocab:
    case ErrorCode::EmptyStratum:
    case ErrorCode::TokenMissing:
    case ErrorCode::BadTableFile:
    case ErrorCode::BadCheckpoint:
    case ErrorCode::BadSimData:
    case ErrorCode::InvalidConfig:
    case ErrorCode::Io:
      return true;
    default:
      return false;
  }
}

Error::Error(ErrorCode code, const std::string& message, std::optional<std::size_t> line)
    : std::runtime_error(decorate(code, message, line)), code_(code), line_(line) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "short write to " + path.string());
}

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v & 0xFF));
  u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

bool ByteReader::raw(std::size_t n, std::string_view& out) {
  if (remaining() < n) return false;
  out = data_.substr(pos_, n);
  pos_ += n;
  return true;
}

bool ByteReader::u8(std::uint8_t& v) {
  if (remaining() < 1) return false;
  v = static_cast<std::uint8_t>(data_[pos_++]);
  return true;
}

bool ByteReader::u16(std::uint16_t& v) {
  std::uint8_t lo = 0, hi = 0;
  if (!u8(lo) || !u8(hi)) return false;
  v = static_cast<std::uint16_t>(lo | (hi << 8));
  return true;
}

bool ByteReader::u32(std::uint32_t& v) {
  v = 0;
  for (int i = 0; i < 4; ++i) {
    std::uint8_t b = 0;
    if (!u8(b)) return false;
    v |= static_cast<std::uint32_t>(b) << (8 * i);
  }
  return true;
}

bool ByteReader::f32(float& v) {
  std::uint32_t bits = 0;
  if (!u32(bits)) return false;
  v = std::bit_cast<float>(bits);
  return true;
}

}  // namespace niab
