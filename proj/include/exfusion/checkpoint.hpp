#pragma once

#include "exfusion/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace exfusion {

// Binary layout, all integers little-endian:
//   "EXFU" u32 version u32 tensor_count
//   per record: u32 name_len, name, u8 dtype, u8 rank, u64 dims[rank], payload
//   u32 meta_count, then meta records in the same form, names prefixed "meta/"

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 1, F64 = 2, I64 = 3, U8 = 4 };

std::size_t dtype_size(DType d);

class CheckpointError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
public:
	using CheckpointError::CheckpointError;
};

struct Record {
	std::string name;
	DType dtype = DType::F32;
	Shape shape;
	std::vector<std::uint8_t> bytes; ///< payload in host order (little-endian hosts only)
};

/// Named tensors plus scalar metadata.
class Checkpoint {
public:
	template<typename T>
	void put(const std::string &name, const Tensor<T> &t);
	template<typename T>
	Tensor<T> get(const std::string &name) const;
	bool contains(const std::string &name) const { return find(tensors_, name) != nullptr; }

	void put_meta_int(const std::string &key, std::int64_t v);
	void put_meta_real(const std::string &key, double v);
	void put_meta_string(const std::string &key, std::string_view v);
	std::int64_t meta_int(const std::string &key) const;
	double meta_real(const std::string &key) const;
	std::string meta_string(const std::string &key) const;
	bool has_meta(const std::string &key) const { return find(meta_, "meta/" + key) != nullptr; }

	const std::vector<Record> &tensors() const noexcept { return tensors_; }
	const std::vector<Record> &meta() const noexcept { return meta_; }

	std::vector<std::uint8_t> serialize() const;
	static Checkpoint deserialize(std::span<const std::uint8_t> data);

	/// Writes via a temporary file and rename, so a crash never leaves a torn file.
	void save(const std::filesystem::path &path) const;
	static Checkpoint load(const std::filesystem::path &path);

private:
	static const Record *find(const std::vector<Record> &v, std::string_view name);
	static void upsert(std::vector<Record> &v, Record r);
	const Record &meta_record(const std::string &key, DType want) const;

	std::vector<Record> tensors_;
	std::vector<Record> meta_;
};

} // namespace exfusion
