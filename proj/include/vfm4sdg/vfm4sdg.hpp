#pragma once

#include "vfm4sdg/artifact_io.hpp"
#include "vfm4sdg/boxes.hpp"
#include "vfm4sdg/detect_metrics.hpp"
#include "vfm4sdg/errors.hpp"
#include "vfm4sdg/gradcheck.hpp"
#include "vfm4sdg/gradcheck_suite.hpp"
#include "vfm4sdg/parallel.hpp"
#include "vfm4sdg/prototype_bank.hpp"
#include "vfm4sdg/query_enhance.hpp"
#include "vfm4sdg/relation_distill.hpp"
#include "vfm4sdg/tensor.hpp"
