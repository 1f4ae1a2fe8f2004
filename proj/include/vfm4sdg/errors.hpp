#pragma once

#include <stdexcept>
#include <string>

namespace vfm4sdg {

// Every failure carries the module that raised it and a short kind, so the
// CLI can print "ERROR:<module>:<kind>: <message>" on a single line.
class Error : public std::runtime_error {
public:
    Error(std::string module, std::string kind, const std::string& message)
        : std::runtime_error(message), module_(std::move(module)), kind_(std::move(kind)) {}

    const std::string& module() const noexcept { return module_; }
    const std::string& kind() const noexcept { return kind_; }
    std::string tag() const { return "ERROR:" + module_ + ":" + kind_; }

private:
    std::string module_;
    std::string kind_;
};

#define VFM4SDG_DEFINE_ERROR(Name, kind_str)                                    \
    class Name : public Error {                                                 \
    public:                                                                     \
        Name(std::string module, const std::string& message)                    \
            : Error(std::move(module), kind_str, message) {}                    \
    };

VFM4SDG_DEFINE_ERROR(DimensionError, "dimension")
VFM4SDG_DEFINE_ERROR(ContractError, "contract")
VFM4SDG_DEFINE_ERROR(LookupError, "lookup")
VFM4SDG_DEFINE_ERROR(ConfigurationError, "configuration")
VFM4SDG_DEFINE_ERROR(FormatError, "format")
VFM4SDG_DEFINE_ERROR(TruncationError, "truncation")
VFM4SDG_DEFINE_ERROR(VersionError, "version")
VFM4SDG_DEFINE_ERROR(UnsupportedDtypeError, "unsupported-dtype")
VFM4SDG_DEFINE_ERROR(SchemaError, "schema")
VFM4SDG_DEFINE_ERROR(ValidationError, "validation")
VFM4SDG_DEFINE_ERROR(IoError, "io")

#undef VFM4SDG_DEFINE_ERROR

}  // namespace vfm4sdg
