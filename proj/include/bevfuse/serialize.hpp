#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "bevfuse/params.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Binary layouts are little-endian and described in docs/formats.md.

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

/// "BFT1" tensor record.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Checkpoint bytes: "BFCK", u32 record count, then per parameter
/// u32 name length, name bytes, BFT1 tensor. Records follow creation order.
std::string checkpoint_bytes(const ParameterStore& store);
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store);
/// Overwrites the values of every parameter in `store` from the file. Names
/// and shapes must match exactly.
void load_checkpoint(const std::filesystem::path& path, ParameterStore& store);

/// Git blob hash: SHA-1 of "blob <size>\0" followed by the bytes, as hex.
std::string git_blob_sha1(const std::string& bytes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace bevfuse
