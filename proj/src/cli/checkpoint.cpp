#include "exfusion/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace exfusion {

std::size_t dtype_size(DType d) {
	switch (d) {
		case DType::F32:
			return 4;
		case DType::F64:
		case DType::I64:
			return 8;
		case DType::U8:
			return 1;
	}
	throw CheckpointError("unknown dtype code " + std::to_string(int(d)));
}

namespace {

template<typename T>
constexpr DType dtype_of() {
	if constexpr (std::is_same_v<T, float>)
		return DType::F32;
	else
		return DType::F64;
}

template<typename U>
void write_pod(std::vector<std::uint8_t> &out, U v) {
	const auto *p = reinterpret_cast<const std::uint8_t *>(&v);
	out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
public:
	explicit Reader(std::span<const std::uint8_t> d) : data_(d) {}

	template<typename U>
	U pod(const char *what) {
		U v;
		std::memcpy(&v, take(sizeof(U), what), sizeof(U));
		return v;
	}
	const std::uint8_t *take(std::size_t n, const char *what) {
		if (n > data_.size() - pos_)
			throw CheckpointError(std::string("corrupt checkpoint: truncated while reading ") + what);
		const std::uint8_t *p = data_.data() + pos_;
		pos_ += n;
		return p;
	}
	bool done() const { return pos_ == data_.size(); }

private:
	std::span<const std::uint8_t> data_;
	std::size_t pos_ = 0;
};

void write_record(std::vector<std::uint8_t> &out, const Record &r) {
	write_pod(out, std::uint32_t(r.name.size()));
	out.insert(out.end(), r.name.begin(), r.name.end());
	write_pod(out, std::uint8_t(r.dtype));
	write_pod(out, std::uint8_t(r.shape.size()));
	for (std::size_t d : r.shape)
		write_pod(out, std::uint64_t(d));
	out.insert(out.end(), r.bytes.begin(), r.bytes.end());
}

Record read_record(Reader &in) {
	Record r;
	const auto len = in.pod<std::uint32_t>("name length");
	const auto *name = in.take(len, "name");
	r.name.assign(reinterpret_cast<const char *>(name), len);
	const auto code = in.pod<std::uint8_t>("dtype");
	if (code < 1 || code > 4)
		throw CheckpointError("corrupt checkpoint: bad dtype code " + std::to_string(code) + " for " + r.name);
	r.dtype = DType(code);
	const auto rank = in.pod<std::uint8_t>("rank");
	std::size_t n = 1;
	for (std::uint8_t i = 0; i < rank; i++) {
		const auto d = in.pod<std::uint64_t>("dims");
		if (d == 0 || d > (std::uint64_t(1) << 40))
			throw CheckpointError("corrupt checkpoint: bad dimension in " + r.name);
		r.shape.push_back(std::size_t(d));
		n *= std::size_t(d);
	}
	const std::size_t bytes = n * dtype_size(r.dtype);
	const auto *p = in.take(bytes, "payload");
	r.bytes.assign(p, p + bytes);
	return r;
}

} // namespace

const Record *Checkpoint::find(const std::vector<Record> &v, std::string_view name) {
	for (const auto &r : v)
		if (r.name == name)
			return &r;
	return nullptr;
}

void Checkpoint::upsert(std::vector<Record> &v, Record r) {
	for (auto &x : v)
		if (x.name == r.name) {
			x = std::move(r);
			return;
		}
	v.push_back(std::move(r));
}

template<typename T>
void Checkpoint::put(const std::string &name, const Tensor<T> &t) {
	Record r{name, dtype_of<T>(), t.shape(), {}};
	const auto *p = reinterpret_cast<const std::uint8_t *>(t.raw());
	r.bytes.assign(p, p + t.size() * sizeof(T));
	upsert(tensors_, std::move(r));
}

template<typename T>
Tensor<T> Checkpoint::get(const std::string &name) const {
	const Record *r = find(tensors_, name);
	if (!r)
		throw CheckpointError("checkpoint has no tensor " + name);
	if (r->dtype != dtype_of<T>())
		throw CheckpointError("tensor " + name + " has dtype code " + std::to_string(int(r->dtype)) + ", expected " +
				std::to_string(int(dtype_of<T>())));
	Tensor<T> t(r->shape);
	std::memcpy(t.raw(), r->bytes.data(), r->bytes.size());
	return t;
}

template void Checkpoint::put(const std::string &, const Tensor<float> &);
template void Checkpoint::put(const std::string &, const Tensor<double> &);
template Tensor<float> Checkpoint::get(const std::string &) const;
template Tensor<double> Checkpoint::get(const std::string &) const;

void Checkpoint::put_meta_int(const std::string &key, std::int64_t v) {
	Record r{"meta/" + key, DType::I64, {}, {}};
	write_pod(r.bytes, v);
	upsert(meta_, std::move(r));
}

void Checkpoint::put_meta_real(const std::string &key, double v) {
	Record r{"meta/" + key, DType::F64, {}, {}};
	write_pod(r.bytes, v);
	upsert(meta_, std::move(r));
}

void Checkpoint::put_meta_string(const std::string &key, std::string_view v) {
	// rank-1 u8 tensor; empty strings are stored as a single NUL so no dim is zero
	Record r{"meta/" + key, DType::U8, {std::max<std::size_t>(v.size(), 1)}, {}};
	r.bytes.assign(v.begin(), v.end());
	if (v.empty())
		r.bytes.push_back(0);
	upsert(meta_, std::move(r));
}

const Record &Checkpoint::meta_record(const std::string &key, DType want) const {
	const Record *r = find(meta_, "meta/" + key);
	if (!r)
		throw CheckpointError("checkpoint has no metadata " + key);
	if (r->dtype != want)
		throw CheckpointError("metadata " + key + " has unexpected dtype");
	return *r;
}

std::int64_t Checkpoint::meta_int(const std::string &key) const {
	const Record &r = meta_record(key, DType::I64);
	std::int64_t v;
	std::memcpy(&v, r.bytes.data(), sizeof v);
	return v;
}

double Checkpoint::meta_real(const std::string &key) const {
	const Record &r = meta_record(key, DType::F64);
	double v;
	std::memcpy(&v, r.bytes.data(), sizeof v);
	return v;
}

std::string Checkpoint::meta_string(const std::string &key) const {
	const Record &r = meta_record(key, DType::U8);
	if (r.bytes.size() == 1 && r.bytes[0] == 0)
		return {};
	return {r.bytes.begin(), r.bytes.end()};
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
	std::vector<std::uint8_t> out{'E', 'X', 'F', 'U'};
	write_pod(out, kCheckpointVersion);
	write_pod(out, std::uint32_t(tensors_.size()));
	for (const auto &r : tensors_)
		write_record(out, r);
	write_pod(out, std::uint32_t(meta_.size()));
	for (const auto &r : meta_)
		write_record(out, r);
	return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> data) {
	Reader in(data);
	const auto *magic = in.take(4, "magic");
	if (std::memcmp(magic, "EXFU", 4) != 0)
		throw CheckpointError("corrupt checkpoint: bad magic");
	const auto version = in.pod<std::uint32_t>("version");
	if (version != kCheckpointVersion)
		throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
				std::to_string(kCheckpointVersion) + ")");
	Checkpoint ck;
	const auto n = in.pod<std::uint32_t>("tensor count");
	for (std::uint32_t i = 0; i < n; i++)
		ck.tensors_.push_back(read_record(in));
	const auto m = in.pod<std::uint32_t>("metadata count");
	for (std::uint32_t i = 0; i < m; i++) {
		Record r = read_record(in);
		if (r.name.rfind("meta/", 0) != 0)
			throw CheckpointError("corrupt checkpoint: metadata record " + r.name + " lacks the meta/ prefix");
		ck.meta_.push_back(std::move(r));
	}
	if (!in.done())
		throw CheckpointError("corrupt checkpoint: trailing bytes");
	return ck;
}

void Checkpoint::save(const std::filesystem::path &path) const {
	const auto bytes = serialize();
	auto tmp = path;
	tmp += ".tmp";
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out)
			throw std::runtime_error("cannot open " + tmp.string() + " for writing");
		out.write(reinterpret_cast<const char *>(bytes.data()), std::streamsize(bytes.size()));
		if (!out)
			throw std::runtime_error("write failed for " + tmp.string());
	}
	std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path &path) {
	std::ifstream in(path, std::ios::binary);
	if (!in)
		throw std::runtime_error("cannot open checkpoint " + path.string());
	std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
	try {
		return deserialize(bytes);
	} catch (const CheckpointVersionError &e) {
		throw CheckpointVersionError(path.string() + ": " + e.what());
	} catch (const CheckpointError &e) {
		throw CheckpointError(path.string() + ": " + e.what());
	}
}

} // namespace exfusion
