#include "tokenhalt/params.hpp"

#include <cmath>
#include <stdexcept>

namespace tokenhalt {

ad::Var ParamStore::add(const std::string& name, Tensor init) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
    entries_.push_back({name, ad::parameter(std::move(init))});
    return entries_.back().var;
}

const ad::Var& ParamStore::get(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.var;
    throw std::out_of_range("unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
}

Tensor init_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain) {
    Tensor t(std::move(shape));
    const double sd = gain / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
    for (auto& v : t.vec()) v = sd * rng.normal();
    return t;
}

}  // namespace tokenhalt
