#pragma once

#include <string>
#include <vector>

#include "stsr/container.hpp"
#include "stsr/data.hpp"

namespace stsr {

namespace detail {

inline std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) out += (i ? "," : "") + names[i];
    return out;
}

inline std::vector<std::string> split_names(const std::string& joined) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= joined.size()) {
        std::size_t comma = joined.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(joined.substr(start));
            break;
        }
        out.push_back(joined.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

inline Tensor norm_tensor(const STStack& s) {
    std::vector<double> v = s.norm_min;
    v.insert(v.end(), s.norm_max.begin(), s.norm_max.end());
    return Tensor({2, s.n_genes()}, std::move(v));
}

inline void apply_norm_tensor(STStack& s, const Tensor& t) {
    const int n = t.dim(1);
    s.norm_min.assign(t.values().begin(), t.values().begin() + n);
    s.norm_max.assign(t.values().begin() + n, t.values().end());
}

}  // namespace detail

// Dataset container layout: one entry group per sample (s<i>.hr / .lr /
// .hist / .loading / .norm) plus shared gene names and scales in metadata.
inline void save_dataset(const std::string& path, const std::vector<SyntheticSample>& samples) {
    Container c;
    c.set_meta("kind", "dataset");
    c.set_meta("n_samples", std::to_string(samples.size()));
    if (!samples.empty()) {
        c.set_meta("genes", detail::join_names(samples[0].hr.genes));
        c.set_meta("hr_scale_um", std::to_string(samples[0].hr.scale_um));
        c.set_meta("lr_scale_um", std::to_string(samples[0].lr.scale_um));
        c.set_meta("hist_scale_um", std::to_string(samples[0].hist.scale_um));
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::string p = "s" + std::to_string(i) + ".";
        c.put(p + "hr", samples[i].hr.data);
        c.put(p + "lr", samples[i].lr.data);
        c.put(p + "hist", samples[i].hist.data);
        c.put(p + "loading", samples[i].loading);
        c.put(p + "norm", detail::norm_tensor(samples[i].hr), "f64");
    }
    c.save(path);
}

inline std::vector<SyntheticSample> load_dataset(const std::string& path) {
    Container c = Container::load(path);
    if (!c.has_meta("kind") || c.meta("kind") != "dataset")
        throw ContainerError("load_dataset: '" + path + "' is not a dataset container");
    int n = std::stoi(c.meta("n_samples"));
    std::vector<std::string> genes =
        n > 0 ? detail::split_names(c.meta("genes")) : std::vector<std::string>{};
    std::vector<SyntheticSample> out;
    for (int i = 0; i < n; ++i) {
        std::string p = "s" + std::to_string(i) + ".";
        SyntheticSample s;
        s.hr.genes = genes;
        s.hr.data = c.get(p + "hr");
        s.hr.scale_um = std::stod(c.meta("hr_scale_um"));
        detail::apply_norm_tensor(s.hr, c.get(p + "norm"));
        s.lr.genes = genes;
        s.lr.data = c.get(p + "lr");
        s.lr.scale_um = std::stod(c.meta("lr_scale_um"));
        s.lr.norm_min = s.hr.norm_min;
        s.lr.norm_max = s.hr.norm_max;
        s.hist.data = c.get(p + "hist");
        s.hist.scale_um = std::stod(c.meta("hist_scale_um"));
        s.loading = c.get(p + "loading");
        out.push_back(std::move(s));
    }
    return out;
}

// Prediction container: s<i>.data stacks with shared gene names and scale.
inline void save_stacks(const std::string& path, const std::vector<STStack>& stacks) {
    Container c;
    c.set_meta("kind", "stacks");
    c.set_meta("n_samples", std::to_string(stacks.size()));
    if (!stacks.empty()) {
        c.set_meta("genes", detail::join_names(stacks[0].genes));
        c.set_meta("scale_um", std::to_string(stacks[0].scale_um));
    }
    for (std::size_t i = 0; i < stacks.size(); ++i) {
        std::string p = "s" + std::to_string(i) + ".";
        c.put(p + "data", stacks[i].data);
        if (!stacks[i].norm_min.empty()) c.put(p + "norm", detail::norm_tensor(stacks[i]), "f64");
    }
    c.save(path);
}

inline std::vector<STStack> load_stacks(const std::string& path) {
    Container c = Container::load(path);
    if (!c.has_meta("kind") || c.meta("kind") != "stacks")
        throw ContainerError("load_stacks: '" + path + "' is not a prediction container");
    int n = std::stoi(c.meta("n_samples"));
    std::vector<STStack> out;
    for (int i = 0; i < n; ++i) {
        std::string p = "s" + std::to_string(i) + ".";
        STStack s;
        s.genes = n > 0 ? detail::split_names(c.meta("genes")) : std::vector<std::string>{};
        s.data = c.get(p + "data");
        s.scale_um = std::stod(c.meta("scale_um"));
        if (c.has(p + "norm")) detail::apply_norm_tensor(s, c.get(p + "norm"));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace stsr
