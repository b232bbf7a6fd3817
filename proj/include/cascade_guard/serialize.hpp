#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cascade_guard/attacks.hpp"
#include "cascade_guard/detector.hpp"
#include "cascade_guard/network.hpp"

namespace cguard {

inline constexpr const char* kFormatVersion = "cascade-guard/1";

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws FormatError on characters outside the alphabet or bad padding.
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Little-endian float64 payload, base64 encoded.
std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(const std::string& text);

// JSON documents carry {"version": "cascade-guard/1", "kind": ...}; loaders
// reject other versions and report schema problems as FormatError. Keys are
// sorted so identical objects serialize to identical bytes.

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& text);

std::string network_to_json(const Network& net);
Network network_from_json(const std::string& text);
void save_network(const std::filesystem::path& path, const Network& net);
Network load_network(const std::filesystem::path& path);
/// Hex FNV-1a digest of the serialized network.
std::string network_fingerprint(const Network& net);

std::string cascade_to_json(const CascadeModel& model);
CascadeModel cascade_from_json(const std::string& text);
void save_cascade(const std::filesystem::path& path, const CascadeModel& model);
CascadeModel load_cascade(const std::filesystem::path& path);

/// Directory with images.idx (float64 IDX) and manifest.json listing the
/// per-record metadata. `provenance` is free-form JSON text.
void save_adversarial_batch(const std::filesystem::path& dir,
                            const std::vector<AdversarialRecord>& records,
                            const std::string& provenance = "{}");
std::vector<AdversarialRecord> load_adversarial_batch(const std::filesystem::path& dir);

std::string read_text_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it into place.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace cguard
