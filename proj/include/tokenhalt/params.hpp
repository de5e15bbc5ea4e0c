#pragma once

#include "tokenhalt/autodiff.hpp"
#include "tokenhalt/rng.hpp"

#include <string>
#include <vector>

namespace tokenhalt {

/// Named, ordered collection of trainable leaves.
class ParamStore {
public:
    struct Entry {
        std::string name;
        ad::Var var;
    };

    /// Registers a new parameter; names must be unique.
    ad::Var add(const std::string& name, Tensor init);
    const ad::Var& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t total_size() const;
    void zero_grad();

private:
    std::vector<Entry> entries_;
};

/// Scaled-normal init with std = gain / sqrt(fan_in).
Tensor init_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

}  // namespace tokenhalt
