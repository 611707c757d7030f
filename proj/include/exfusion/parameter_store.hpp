#pragma once

#include "exfusion/autograd.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace exfusion {

/// Ordered set of named parameters and buffers. Addresses stay stable for the
/// lifetime of the store, so layers may hold raw pointers into it.
template<typename T>
class ParameterStore {
public:
	ParameterStore() = default;
	ParameterStore(const ParameterStore &) = delete;
	ParameterStore &operator=(const ParameterStore &) = delete;
	ParameterStore(ParameterStore &&) noexcept = default;
	ParameterStore &operator=(ParameterStore &&) noexcept = default;

	Parameter<T> &add(std::string name, Tensor<T> value, ParamKind kind) {
		if (index_.contains(name))
			throw std::invalid_argument("duplicate parameter name " + name);
		auto p = std::make_unique<Parameter<T>>();
		p->name = name;
		p->value = std::move(value);
		p->kind = kind;
		Parameter<T> &ref = *p;
		index_.emplace(std::move(name), p.get());
		items_.push_back(std::move(p));
		return ref;
	}

	Parameter<T> *find(const std::string &name) {
		auto it = index_.find(name);
		return it == index_.end() ? nullptr : it->second;
	}
	const Parameter<T> *find(const std::string &name) const {
		auto it = index_.find(name);
		return it == index_.end() ? nullptr : it->second;
	}
	Parameter<T> &at(const std::string &name) {
		if (Parameter<T> *p = find(name))
			return *p;
		throw std::out_of_range("no parameter named " + name);
	}
	const Parameter<T> &at(const std::string &name) const {
		if (const Parameter<T> *p = find(name))
			return *p;
		throw std::out_of_range("no parameter named " + name);
	}

	std::size_t size() const noexcept { return items_.size(); }
	auto begin() { return items_.begin(); }
	auto end() { return items_.end(); }
	auto begin() const { return items_.cbegin(); }
	auto end() const { return items_.cend(); }

	void zero_grad() {
		for (auto &p : items_)
			p->zero_grad();
	}

	/// Element count of everything except buffers.
	std::size_t parameter_count() const {
		std::size_t n = 0;
		for (const auto &p : items_)
			if (p->kind != ParamKind::Buffer)
				n += p->value.size();
		return n;
	}

private:
	std::vector<std::unique_ptr<Parameter<T>>> items_;
	std::map<std::string, Parameter<T> *, std::less<>> index_;
};

} // namespace exfusion
